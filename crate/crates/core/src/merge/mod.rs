//! Task-vector merging: optional Fisher-weighted trimming, per-layer
//! coefficients with gate protection, then output-norm calibration.

pub mod calibrate;
pub mod trim;

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alpha::AlphaAssignment;
use crate::archive::{Tensor, TensorArchive};
use crate::error::{Error, Result};
use crate::fim::FimScores;
use crate::io::sha256_hex;
use crate::topology::{Category, ModelTopology};

pub use calibrate::{norm_calibrate, output_norm, Calibration, CalibrationStatus};
pub use trim::{survivor_count, top_k_mask, trim_task_vector, TrimMode, TrimStat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    /// Plain weighted task arithmetic.
    #[serde(alias = "ta")]
    FimTa,
    /// Trim the task vector before applying coefficients.
    #[serde(alias = "ties")]
    FimTies,
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fim_ta" | "fim-ta" | "ta" => Ok(Self::FimTa),
            "fim_ties" | "fim-ties" | "ties" => Ok(Self::FimTies),
            _ => Err(Error::InvalidArgument(format!("unknown merge method `{s}`"))),
        }
    }
}

impl FromStr for TrimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_tensor" | "per-tensor" => Ok(Self::PerTensor),
            "pooled_layer" | "pooled-layer" | "pooled" => Ok(Self::PooledLayer),
            _ => Err(Error::InvalidArgument(format!("unknown trim mode `{s}`"))),
        }
    }
}

fn default_trim_ratio() -> f64 {
    0.2
}
fn default_gate_factor() -> f64 {
    0.7
}
fn default_norm_threshold() -> Option<f64> {
    Some(0.05)
}
fn default_probe_seed() -> u64 {
    42
}
fn default_probe_count() -> usize {
    8
}
fn default_true() -> bool {
    true
}

/// Everything that determines a merge besides the input checkpoints.
///
/// `norm_threshold: None` disables calibration (an infinite threshold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergePlan {
    pub method: MergeMethod,
    pub alphas: AlphaAssignment,
    #[serde(default = "default_trim_ratio")]
    pub trim_ratio: f64,
    #[serde(default = "default_gate_factor")]
    pub gate_factor: f64,
    #[serde(default = "default_norm_threshold")]
    pub norm_threshold: Option<f64>,
    #[serde(default = "default_probe_seed")]
    pub probe_seed: u64,
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
    #[serde(default)]
    pub trim_mode: TrimMode,
    /// Permit `per_layer * |delta|` importance when no elementwise Fisher is
    /// available for a tensor.
    #[serde(default = "default_true")]
    pub allow_scalar_fim_fallback: bool,
}

impl MergePlan {
    pub fn new(method: MergeMethod, alphas: AlphaAssignment) -> Self {
        Self {
            method,
            alphas,
            trim_ratio: default_trim_ratio(),
            gate_factor: default_gate_factor(),
            norm_threshold: default_norm_threshold(),
            probe_seed: default_probe_seed(),
            probe_count: default_probe_count(),
            trim_mode: TrimMode::default(),
            allow_scalar_fim_fallback: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPlan(msg));
        if !(self.trim_ratio > 0.0 && self.trim_ratio <= 1.0) {
            return bad(format!("trim_ratio {} outside (0, 1]", self.trim_ratio));
        }
        if !(self.gate_factor > 0.0 && self.gate_factor <= 1.0) {
            return bad(format!("gate_factor {} outside (0, 1]", self.gate_factor));
        }
        if let Some(eps) = self.norm_threshold {
            if !(eps >= 0.0) {
                return bad(format!("norm_threshold {eps} is negative"));
            }
        }
        if self.probe_count == 0 {
            return bad("probe_count must be positive".into());
        }
        let alphas = self.alphas.per_layer.values().chain([&self.alphas.fallback_alpha]);
        for &a in alphas {
            if !a.is_finite() {
                return bad(format!("non-finite coefficient {a}"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("plan serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub layer_index: Option<usize>,
    pub category: Category,
    /// Coefficient applied to this tensor's task vector.
    pub alpha: f64,
    pub gate_scaled: bool,
    /// Surviving entries after trimming, when the tensor was trimmed.
    pub retained: Option<usize>,
    pub total: usize,
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub alpha: f64,
    pub gate_alpha: Option<f64>,
    pub retained: usize,
    pub total: usize,
    pub rescaled_tensors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub method: MergeMethod,
    pub plan_hash: String,
    pub base_digest: String,
    pub tuned_digest: String,
    pub fim_model_id: Option<String>,
    pub trim_mode: Option<TrimMode>,
    pub trim_ratio: Option<f64>,
    pub probe_seed: u64,
    pub probe_count: usize,
    pub norm_threshold: Option<f64>,
    pub fallback_alpha: f64,
    /// Tensors trimmed by `per_layer * |delta|` for lack of elementwise Fisher.
    pub scalar_fim_fallback: Vec<String>,
    pub trim_groups: Vec<TrimStat>,
    pub layers: BTreeMap<usize, LayerRecord>,
    pub tensors: Vec<TensorRecord>,
}

/// `tuned - base`, entry by entry.
pub fn task_vector(base: &TensorArchive, tuned: &TensorArchive) -> Result<TensorArchive> {
    base.check_aligned(tuned)?;
    let mut out = TensorArchive::new();
    for (name, b) in base.iter() {
        let t = tuned.get(name).expect("aligned");
        let data = b.data().iter().zip(t.data()).map(|(&x, &y)| y - x).collect();
        out.insert(name, Tensor::new(b.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

fn diff(base: &Tensor, tuned: &Tensor) -> Vec<f64> {
    base.data().iter().zip(tuned.data()).map(|(&b, &t)| t as f64 - b as f64).collect()
}

/// Merge `tuned` into `base` according to `plan`.
pub fn merge(
    base: &TensorArchive,
    tuned: &TensorArchive,
    plan: &MergePlan,
    fim: Option<&FimScores>,
    topology: &ModelTopology,
) -> Result<(TensorArchive, MergeReport)> {
    plan.validate()?;
    base.check_aligned(tuned)?;
    let missing: Vec<&str> = base.names().filter(|n| topology.get(n).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Misaligned(format!(
            "topology does not cover: {}",
            missing.join(", ")
        )));
    }
    if let Some(f) = fim {
        f.validate(Some(topology))?;
    }

    let trim = match plan.method {
        MergeMethod::FimTa => None,
        MergeMethod::FimTies => {
            let deltas: BTreeMap<String, Vec<f64>> = topology
                .coefficient_layers()
                .into_iter()
                .flat_map(|l| topology.coefficient_params(l).map(str::to_string).collect::<Vec<_>>())
                .map(|n| {
                    let d = diff(base.get(&n).expect("aligned"), tuned.get(&n).expect("aligned"));
                    (n, d)
                })
                .collect();
            Some(trim::compute_masks(
                &deltas,
                fim,
                topology,
                plan.trim_ratio,
                plan.trim_mode,
                plan.allow_scalar_fim_fallback,
            )?)
        }
    };
    let masks = trim.as_ref().map(|t| &t.masks);

    let names: Vec<&str> = base.names().collect();
    let merged: Vec<(Tensor, TensorRecord)> = names
        .par_iter()
        .map(|&name| {
            let b = base.get(name).expect("aligned");
            let t = tuned.get(name).expect("aligned");
            let rec = topology.get(name).expect("checked");
            let gate = rec.category == Category::GateProjection;
            let alpha = if rec.in_coefficient_set {
                let a = plan.alphas.alpha_for_layer(rec.layer_index);
                if gate {
                    plan.gate_factor * a
                } else {
                    a
                }
            } else {
                plan.alphas.fallback_alpha
            };
            let mask = masks.and_then(|m| m.get(name));
            let data: Vec<f32> = b
                .data()
                .iter()
                .zip(t.data())
                .enumerate()
                .map(|(i, (&bv, &tv))| {
                    let keep = mask.is_none_or(|m| m[i]);
                    if !keep || alpha == 0.0 {
                        bv
                    } else if alpha == 1.0 {
                        tv
                    } else {
                        (bv as f64 + alpha * (tv as f64 - bv as f64)) as f32
                    }
                })
                .collect();
            let mut out = Tensor::new(b.shape().to_vec(), data)?;
            let calibration = match plan.norm_threshold {
                Some(eps) if b.is_matrix() => {
                    Some(norm_calibrate(&mut out, b, eps, plan.probe_seed, plan.probe_count)?)
                }
                _ => None,
            };
            let record = TensorRecord {
                name: name.to_string(),
                layer_index: rec.layer_index,
                category: rec.category,
                alpha,
                gate_scaled: gate,
                retained: mask.map(|m| m.iter().filter(|&&k| k).count()),
                total: b.numel(),
                calibration,
            };
            Ok((out, record))
        })
        .collect::<Result<_>>()?;

    let mut archive = TensorArchive::new();
    let mut tensors = Vec::with_capacity(merged.len());
    let mut layers: BTreeMap<usize, LayerRecord> = BTreeMap::new();
    for (tensor, record) in merged {
        if let (Some(l), true) = (record.layer_index, topology.get(&record.name).is_some_and(|r| r.in_coefficient_set)) {
            let entry = layers.entry(l).or_insert_with(|| LayerRecord {
                alpha: plan.alphas.alpha_for_layer(Some(l)),
                gate_alpha: None,
                retained: 0,
                total: 0,
                rescaled_tensors: 0,
            });
            if record.gate_scaled {
                entry.gate_alpha = Some(record.alpha);
            }
            entry.retained += record.retained.unwrap_or(record.total);
            entry.total += record.total;
            if record.calibration.as_ref().is_some_and(|c| c.status == CalibrationStatus::Rescaled) {
                entry.rescaled_tensors += 1;
            }
        }
        archive.insert(record.name.clone(), tensor)?;
        tensors.push(record);
    }

    let (scalar_fim_fallback, trim_groups) = match trim {
        Some(t) => (t.fallback_tensors, t.stats),
        None => (Vec::new(), Vec::new()),
    };
    if !scalar_fim_fallback.is_empty() {
        log::warn!(
            "{} tensors trimmed with scalar Fisher fallback (importance = per-layer score x |delta|)",
            scalar_fim_fallback.len()
        );
    }
    let ties = plan.method == MergeMethod::FimTies;
    let report = MergeReport {
        method: plan.method,
        plan_hash: plan.hash(),
        base_digest: base.digest(),
        tuned_digest: tuned.digest(),
        fim_model_id: fim.map(|f| f.meta.model_id.clone()),
        trim_mode: ties.then_some(plan.trim_mode),
        trim_ratio: ties.then_some(plan.trim_ratio),
        probe_seed: plan.probe_seed,
        probe_count: plan.probe_count,
        norm_threshold: plan.norm_threshold,
        fallback_alpha: plan.alphas.fallback_alpha,
        scalar_fim_fallback,
        trim_groups,
        layers,
        tensors,
    };
    Ok((archive, report))
}
