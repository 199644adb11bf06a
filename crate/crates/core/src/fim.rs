//! Data-free diagonal Fisher information.
//!
//! The estimate averages squared gradients of the mean next-token NLL over
//! `N` sequences of i.i.d. uniform tokens; no calibration text is involved.
//! Per-layer scalars are reductions of the elementwise estimate over each
//! layer's coefficient-set parameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{load_archive, write_archive, Tensor, TensorArchive};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::model::corpus::uniform_sequences;
use crate::model::MicroModel;
use crate::topology::{parse_topology, ModelTopology, NamingScheme};

/// How elementwise values are reduced to one scalar per layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FimMeta {
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub model_id: String,
    #[serde(default)]
    pub reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FimScores {
    /// Squared-gradient averages, same names and shapes as the parameters.
    /// Absent when only per-layer values were imported.
    pub elementwise: Option<TensorArchive>,
    pub per_layer: BTreeMap<usize, f64>,
    pub meta: FimMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FimOptions {
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub reduction: Reduction,
}

impl Default for FimOptions {
    fn default() -> Self {
        Self {
            n_samples: 8,
            seq_len: 64,
            seed: 42,
            reduction: Reduction::Mean,
        }
    }
}

/// Diagonal FIM of `model` with per-layer means over the default topology.
pub fn estimate_fim(model: &MicroModel, n_samples: usize, seq_len: usize, seed: u64) -> Result<FimScores> {
    let topology = parse_topology(&model.to_archive(), &NamingScheme::default())?;
    estimate_fim_with(
        model,
        &FimOptions {
            n_samples,
            seq_len,
            seed,
            reduction: Reduction::Mean,
        },
        &topology,
    )
}

pub fn estimate_fim_with(model: &MicroModel, opts: &FimOptions, topology: &ModelTopology) -> Result<FimScores> {
    if opts.n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let samples = uniform_sequences(model.config().vocab_size, opts.n_samples, opts.seq_len, opts.seed);
    let grads = samples
        .par_iter()
        .map(|seq| model.backward_nll(seq))
        .collect::<Result<Vec<_>>>()?;
    // Accumulate in sample order so the sum is reproducible bit for bit.
    let mut acc = vec![0.0f64; model.n_params()];
    for g in &grads {
        for (a, x) in acc.iter_mut().zip(&g.flat) {
            *a += x * x;
        }
    }
    let n = opts.n_samples as f64;
    acc.iter_mut().for_each(|a| *a /= n);

    let archive = model.layout().to_archive(&acc);
    let mut scores = FimScores {
        elementwise: Some(archive),
        per_layer: BTreeMap::new(),
        meta: FimMeta {
            n_samples: opts.n_samples,
            seq_len: opts.seq_len,
            seed: opts.seed,
            model_id: model_id(model),
            reduction: opts.reduction,
        },
    };
    scores.per_layer = per_layer_from_elementwise(
        scores.elementwise.as_ref().expect("just set"),
        topology,
        opts.reduction,
    )?;
    Ok(scores)
}

/// Short content digest identifying a parameter set.
pub fn model_id(model: &MicroModel) -> String {
    model.to_archive().digest()[..16].to_string()
}

/// Recompute `per_layer` from the elementwise values.
pub fn reduce_per_layer(mut scores: FimScores, topology: &ModelTopology) -> Result<FimScores> {
    let elementwise = scores
        .elementwise
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no elementwise FIM to reduce".into()))?;
    scores.per_layer = per_layer_from_elementwise(elementwise, topology, scores.meta.reduction)?;
    Ok(scores)
}

pub fn per_layer_from_elementwise(
    elementwise: &TensorArchive,
    topology: &ModelTopology,
    reduction: Reduction,
) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for layer in topology.coefficient_layers() {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for name in topology.coefficient_params(layer) {
            let t = elementwise
                .get(name)
                .ok_or_else(|| Error::Misaligned(format!("FIM lacks parameter `{name}`")))?;
            sum += t.data().iter().map(|&x| x as f64).sum::<f64>();
            count += t.numel();
        }
        let value = match reduction {
            Reduction::Mean => sum / count as f64,
            Reduction::Sum => sum,
        };
        out.insert(layer, value);
    }
    Ok(out)
}

impl FimScores {
    /// Validate nonnegativity and, when elementwise values are present, that
    /// `per_layer` agrees with their reduction to 1e-7 relative.
    pub fn validate(&self, topology: Option<&ModelTopology>) -> Result<()> {
        if self.meta.n_samples == 0 {
            return Err(Error::Schema("meta.n_samples must be >= 1".into()));
        }
        for (&layer, &v) in &self.per_layer {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Schema(format!("per_layer[{layer}] = {v} is not a finite nonnegative value")));
            }
        }
        let (Some(elementwise), Some(topology)) = (&self.elementwise, topology) else {
            return Ok(());
        };
        for (name, t) in elementwise.iter() {
            if let Some(i) = t.data().iter().position(|&x| !(x >= 0.0)) {
                return Err(Error::Schema(format!("elementwise `{name}`[{i}] is negative")));
            }
        }
        let recomputed = per_layer_from_elementwise(elementwise, topology, self.meta.reduction)?;
        if recomputed.keys().ne(self.per_layer.keys()) {
            return Err(Error::Schema(format!(
                "per_layer covers layers {:?} but elementwise implies {:?}",
                self.per_layer.keys().collect::<Vec<_>>(),
                recomputed.keys().collect::<Vec<_>>()
            )));
        }
        for (layer, &expect) in &recomputed {
            let got = self.per_layer[layer];
            if (got - expect).abs() > 1e-7 * expect.abs().max(f64::MIN_POSITIVE) {
                return Err(Error::Schema(format!(
                    "per_layer[{layer}] = {got:e} but elementwise reduces to {expect:e}"
                )));
            }
        }
        Ok(())
    }

    /// Elementwise values for one parameter, if present.
    pub fn elementwise_for(&self, name: &str) -> Option<&Tensor> {
        self.elementwise.as_ref().and_then(|a| a.get(name))
    }
}

/// On-disk interchange document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FimDocument {
    pub meta: FimMeta,
    pub per_layer: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elementwise_archive: Option<PathBuf>,
}

/// Sibling path used for the elementwise archive of `json_path`.
pub fn elementwise_path_for(json_path: &Path) -> PathBuf {
    let stem = json_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "fim".into());
    json_path.with_file_name(format!("{stem}.elementwise.safetensors"))
}

/// Write the interchange JSON, plus the elementwise archive next to it when
/// present (referenced by file name, relative to the JSON).
pub fn export_fim(scores: &FimScores, path: &Path) -> Result<()> {
    let elementwise_archive = match &scores.elementwise {
        Some(archive) => {
            let ew = elementwise_path_for(path);
            write_archive(archive, &ew)?;
            Some(PathBuf::from(ew.file_name().expect("has file name")))
        }
        None => None,
    };
    let doc = FimDocument {
        meta: scores.meta.clone(),
        per_layer: scores
            .per_layer
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        elementwise_archive,
    };
    write_json(path, &doc)
}

/// Read and validate an interchange JSON. The elementwise archive path, if
/// relative, is resolved against the JSON file's directory; the topology used
/// for the consistency check is parsed from the archive's names.
pub fn import_fim(path: &Path, scheme: &NamingScheme) -> Result<FimScores> {
    let doc: FimDocument = read_json(path)?;
    let mut per_layer = BTreeMap::new();
    for (k, v) in &doc.per_layer {
        let layer: usize = k
            .parse()
            .map_err(|_| Error::Schema(format!("per_layer key `{k}` is not a layer index")))?;
        per_layer.insert(layer, *v);
    }
    let elementwise = match &doc.elementwise_archive {
        Some(rel) => {
            let full = if rel.is_absolute() {
                rel.clone()
            } else {
                path.parent().unwrap_or(Path::new(".")).join(rel)
            };
            Some(load_archive(&full)?)
        }
        None => None,
    };
    let topology = match &elementwise {
        Some(a) => Some(parse_topology(a, scheme)?),
        None => None,
    };
    let scores = FimScores {
        elementwise,
        per_layer,
        meta: doc.meta,
    };
    scores.validate(topology.as_ref())?;
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MicroModelConfig;
    use crate::theory::stats::spearman;

    fn small() -> MicroModel {
        MicroModel::new(MicroModelConfig {
            vocab_size: 32,
            seq_len: 32,
            n_layers: 3,
            hidden_dim: 8,
            ffn_dim: 16,
            seed: 3,
            init_scale: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn single_sample_is_the_squared_gradient() {
        let model = small();
        let scores = estimate_fim(&model, 1, 32, 5).unwrap();
        let seq = &uniform_sequences(32, 1, 32, 5)[0];
        let g = model.backward_nll(seq).unwrap();
        let expect = model.layout().to_archive(&g.flat.iter().map(|x| x * x).collect::<Vec<_>>());
        assert_eq!(scores.elementwise.as_ref().unwrap(), &expect);
    }

    #[test]
    fn values_are_nonnegative_and_dead_rows_are_zero() {
        let model = MicroModel::new(MicroModelConfig { vocab_size: 64, seq_len: 4, n_layers: 1, hidden_dim: 4, ffn_dim: 4, seed: 1, init_scale: 1.0 }).unwrap();
        // 2 samples x 3 input positions can touch at most 6 of 64 embedding rows.
        let scores = estimate_fim(&model, 2, 4, 9).unwrap();
        let emb = scores.elementwise_for("model.embed_tokens.weight").unwrap();
        let zero_rows = emb.data().chunks(4).filter(|r| r.iter().all(|&x| x == 0.0)).count();
        assert!(zero_rows >= 58);
        for (_, t) in scores.elementwise.as_ref().unwrap().iter() {
            assert!(t.data().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let model = small();
        let a = estimate_fim(&model, 4, 32, 42).unwrap();
        let b = estimate_fim(&model, 4, 32, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_layer_is_the_coefficient_set_mean() {
        let model = small();
        let scores = estimate_fim(&model, 2, 16, 1).unwrap();
        let topo = parse_topology(&model.to_archive(), &NamingScheme::default()).unwrap();
        scores.validate(Some(&topo)).unwrap();
        let ew = scores.elementwise.as_ref().unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for name in ["model.layers.1.self_attn.q_proj.weight", "model.layers.1.self_attn.k_proj.weight",
            "model.layers.1.self_attn.v_proj.weight", "model.layers.1.self_attn.o_proj.weight",
            "model.layers.1.mlp.gate_proj.weight", "model.layers.1.mlp.up_proj.weight",
            "model.layers.1.mlp.down_proj.weight"] {
            let t = ew.get(name).unwrap();
            sum += t.data().iter().map(|&x| x as f64).sum::<f64>();
            n += t.numel();
        }
        assert!((scores.per_layer[&1] - sum / n as f64).abs() <= 1e-15 * sum);
    }

    #[test]
    fn reduction_by_hand() {
        let mut ew = TensorArchive::new();
        ew.insert("model.layers.0.mlp.up_proj.weight", Tensor::new(vec![2], vec![1.0, 3.0]).unwrap()).unwrap();
        ew.insert("model.layers.1.mlp.up_proj.weight", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        ew.insert("model.layers.1.input_layernorm.weight", Tensor::new(vec![1], vec![100.0]).unwrap()).unwrap();
        let topo = parse_topology(&ew, &NamingScheme::default()).unwrap();
        let mean = per_layer_from_elementwise(&ew, &topo, Reduction::Mean).unwrap();
        assert_eq!(mean[&0], 2.0);
        assert_eq!(mean[&1], 0.0);
        let sum = per_layer_from_elementwise(&ew, &topo, Reduction::Sum).unwrap();
        assert_eq!(sum[&0], 4.0);
    }

    #[test]
    fn export_import_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let model = small();
        let scores = estimate_fim(&model, 2, 16, 7).unwrap();
        let p = dir.path().join("fim.json");
        export_fim(&scores, &p).unwrap();
        assert!(dir.path().join("fim.elementwise.safetensors").exists());
        let back = import_fim(&p, &NamingScheme::default()).unwrap();
        assert_eq!(back, scores);

        // per_layer-only documents are accepted.
        let lean = FimScores { elementwise: None, ..scores.clone() };
        let q = dir.path().join("lean.json");
        export_fim(&lean, &q).unwrap();
        assert_eq!(import_fim(&q, &NamingScheme::default()).unwrap(), lean);

        // Tampered per-layer value fails the consistency check.
        let mut doc: FimDocument = read_json(&p).unwrap();
        *doc.per_layer.get_mut("0").unwrap() *= 1.001;
        write_json(&p, &doc).unwrap();
        assert!(matches!(import_fim(&p, &NamingScheme::default()), Err(Error::Schema(_))));
    }

    #[test]
    fn import_rejects_negative_and_missing_meta() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        std::fs::write(&p, r#"{"meta":{"n_samples":8,"seq_len":64,"seed":42,"model_id":"x"},"per_layer":{"0":-1.0}}"#).unwrap();
        assert!(matches!(import_fim(&p, &NamingScheme::default()), Err(Error::Schema(_))));
        std::fs::write(&p, r#"{"per_layer":{"0":1.0}}"#).unwrap();
        assert!(matches!(import_fim(&p, &NamingScheme::default()), Err(Error::Schema(_))));
        std::fs::write(&p, r#"{"meta":{"n_samples":8,"seq_len":64,"seed":42,"model_id":"x"},"per_layer":{"zero":1.0}}"#).unwrap();
        assert!(matches!(import_fim(&p, &NamingScheme::default()), Err(Error::Schema(_))));
    }

    #[test]
    fn zero_samples_is_an_error() {
        assert!(estimate_fim(&small(), 0, 16, 1).is_err());
    }

    #[test]
    fn layer_ranking_is_stable_across_seeds() {
        let model = MicroModel::new(MicroModelConfig::default()).unwrap();
        let a = estimate_fim(&model, 8, 64, 42).unwrap();
        let b = estimate_fim(&model, 8, 64, 43).unwrap();
        let xs: Vec<f64> = a.per_layer.values().copied().collect();
        let ys: Vec<f64> = b.per_layer.values().copied().collect();
        let rho = spearman(&xs, &ys).unwrap();
        assert!(rho >= 0.8, "rank correlation {rho}: {xs:?} vs {ys:?}");
    }

    #[test]
    fn seed_variance_shrinks_with_more_samples() {
        let model = MicroModel::new(MicroModelConfig::default()).unwrap();
        let spread = |n: usize| {
            let runs: Vec<BTreeMap<usize, f64>> =
                (0..6).map(|s| estimate_fim(&model, n, 64, 100 + s).unwrap().per_layer).collect();
            // Mean over layers of the coefficient of variation across seeds.
            let layers: Vec<usize> = runs[0].keys().copied().collect();
            layers
                .iter()
                .map(|l| {
                    let v: Vec<f64> = runs.iter().map(|r| r[l]).collect();
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
                    var.sqrt() / mean
                })
                .sum::<f64>()
                / layers.len() as f64
        };
        let (s1, s4, s8) = (spread(1), spread(4), spread(8));
        assert!(s1 > s4 && s4 > s8, "cv: N=1 {s1}, N=4 {s4}, N=8 {s8}");
    }
}
