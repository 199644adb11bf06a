//! Per-layer merge coefficients from per-layer importance.
//!
//! With `s = log(raw)`, `s~ = s - median(s)` and sharpness
//! `theta = 1 / range(s~)`, each layer gets
//! `alpha = 1 - sigmoid(theta * (s~ - max s~))`. The most important layer
//! therefore gets exactly 0.5 and the least important `1 - sigmoid(-1)`; the
//! assignment is invariant to rescaling (and powering) the raw scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::topology::ModelTopology;

/// Raw scores are clamped to this floor before taking logs.
pub const SCORE_FLOOR: f64 = 1e-30;

/// Log-space ranges at or below this are treated as all-equal.
pub const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Per-layer Fisher times mean squared task vector.
    #[default]
    #[serde(alias = "fim_x_delta")]
    FimTimesDeltaSq,
    /// Per-layer Fisher alone.
    FimOnly,
    /// Frobenius norm of the layer's task vector.
    #[serde(alias = "delta_norm")]
    DeltaNormOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSignal {
    pub kind: SignalKind,
    pub per_layer_raw: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub raw: f64,
    pub s: f64,
    pub s_tilde: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaAssignment {
    pub per_layer: BTreeMap<usize, f64>,
    /// Coefficient for parameters outside the coefficient set.
    pub fallback_alpha: f64,
    /// Sharpness actually used (the override when one was given).
    #[serde(default)]
    pub theta_adapt: f64,
    /// `max s~ - min s~`: the dynamic range of the signal in log space.
    #[serde(default)]
    pub log_range: f64,
    #[serde(default)]
    pub diagnostics: BTreeMap<usize, LayerDiagnostics>,
}

impl AlphaAssignment {
    /// Same coefficient for every layer (used for endpoint checks and plain
    /// task arithmetic).
    pub fn uniform(layers: impl IntoIterator<Item = usize>, alpha: f64) -> Self {
        Self {
            per_layer: layers.into_iter().map(|l| (l, alpha)).collect(),
            fallback_alpha: alpha,
            theta_adapt: 0.0,
            log_range: 0.0,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn alpha_for_layer(&self, layer: Option<usize>) -> f64 {
        layer
            .and_then(|l| self.per_layer.get(&l))
            .copied()
            .unwrap_or(self.fallback_alpha)
    }
}

/// Mean of squared task-vector entries over each layer's coefficient-set
/// parameters.
pub fn delta_layer_norms(delta: &TensorArchive, topology: &ModelTopology) -> Result<BTreeMap<usize, f64>> {
    layer_square_sums(delta, topology).map(|m| m.into_iter().map(|(l, (sum, n))| (l, sum / n as f64)).collect())
}

/// Frobenius norm of each layer's coefficient-set task vector.
pub fn delta_layer_frobenius(delta: &TensorArchive, topology: &ModelTopology) -> Result<BTreeMap<usize, f64>> {
    layer_square_sums(delta, topology).map(|m| m.into_iter().map(|(l, (sum, _))| (l, sum.sqrt())).collect())
}

fn layer_square_sums(delta: &TensorArchive, topology: &ModelTopology) -> Result<BTreeMap<usize, (f64, usize)>> {
    let mut out = BTreeMap::new();
    for layer in topology.coefficient_layers() {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for name in topology.coefficient_params(layer) {
            let t = delta
                .get(name)
                .ok_or_else(|| Error::Misaligned(format!("task vector lacks `{name}`")))?;
            sum += t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            n += t.numel();
        }
        out.insert(layer, (sum, n));
    }
    Ok(out)
}

impl ImportanceSignal {
    /// Build a signal from per-layer Fisher values and the task vector.
    pub fn build(
        kind: SignalKind,
        fim_per_layer: &BTreeMap<usize, f64>,
        delta: &TensorArchive,
        topology: &ModelTopology,
    ) -> Result<Self> {
        let layers = topology.coefficient_layers();
        if layers.is_empty() {
            return Err(Error::EmptyCoefficientSet);
        }
        let fim_at = |l: &usize| {
            fim_per_layer
                .get(l)
                .copied()
                .ok_or_else(|| Error::Misaligned(format!("FIM has no value for layer {l}")))
        };
        let per_layer_raw = match kind {
            SignalKind::FimTimesDeltaSq => {
                let norms = delta_layer_norms(delta, topology)?;
                layers.iter().map(|l| Ok((*l, fim_at(l)? * norms[l]))).collect::<Result<_>>()?
            }
            SignalKind::FimOnly => layers.iter().map(|l| Ok((*l, fim_at(l)?))).collect::<Result<_>>()?,
            SignalKind::DeltaNormOnly => delta_layer_frobenius(delta, topology)?,
        };
        Ok(Self { kind, per_layer_raw })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn assign_alphas(signal: &ImportanceSignal, theta_override: Option<f64>) -> Result<AlphaAssignment> {
    if signal.per_layer_raw.is_empty() {
        return Err(Error::EmptyCoefficientSet);
    }
    if let Some(theta) = theta_override {
        if !theta.is_finite() || theta < 0.0 {
            return Err(Error::InvalidArgument(format!("sigmoid theta {theta} must be finite and >= 0")));
        }
    }
    let mut s = BTreeMap::new();
    for (&layer, &raw) in &signal.per_layer_raw {
        if raw.is_nan() {
            return Err(Error::InvalidArgument(format!("importance of layer {layer} is NaN")));
        }
        s.insert(layer, raw.clamp(SCORE_FLOOR, f64::MAX).ln());
    }
    let mut sorted: Vec<f64> = s.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let s_tilde: BTreeMap<usize, f64> = s.iter().map(|(&l, &v)| (l, v - med)).collect();
    let max = s_tilde.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = s_tilde.values().copied().fold(f64::INFINITY, f64::min);
    let log_range = max - min;

    let degenerate = log_range <= DEGENERATE_RANGE;
    let theta = match theta_override {
        Some(t) => t,
        None if degenerate => 0.0,
        None => 1.0 / log_range,
    };

    let mut per_layer = BTreeMap::new();
    let mut diagnostics = BTreeMap::new();
    for (&layer, &st) in &s_tilde {
        let t = if degenerate && theta_override.is_none() {
            0.5
        } else {
            sigmoid(theta * (st - max))
        };
        per_layer.insert(layer, 1.0 - t);
        diagnostics.insert(
            layer,
            LayerDiagnostics {
                raw: signal.per_layer_raw[&layer],
                s: s[&layer],
                s_tilde: st,
                t,
            },
        );
    }
    let fallback_alpha = per_layer.values().sum::<f64>() / per_layer.len() as f64;
    Ok(AlphaAssignment {
        per_layer,
        fallback_alpha,
        theta_adapt: theta,
        log_range,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::Tensor;
    use crate::topology::{parse_topology, NamingScheme};
    use proptest::prelude::*;

    fn signal(raw: &[f64]) -> ImportanceSignal {
        ImportanceSignal {
            kind: SignalKind::FimTimesDeltaSq,
            per_layer_raw: raw.iter().copied().enumerate().collect(),
        }
    }

    const ALPHA_MIN_LAYER: f64 = 0.7310585786300049; // 1 - sigmoid(-1)

    #[test]
    fn two_layers_hit_both_endpoints() {
        let a = assign_alphas(&signal(&[2.0, 8.0]), None).unwrap();
        assert_eq!(a.per_layer[&1], 0.5);
        assert!((a.per_layer[&0] - ALPHA_MIN_LAYER).abs() < 1e-12);
        assert!((a.fallback_alpha - (0.5 + ALPHA_MIN_LAYER) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_are_degenerate() {
        let a = assign_alphas(&signal(&[3.0, 3.0, 3.0]), None).unwrap();
        assert!(a.per_layer.values().all(|&x| x == 0.5));
        assert_eq!(a.theta_adapt, 0.0);
        assert_eq!(a.fallback_alpha, 0.5);
    }

    #[test]
    fn zero_scores_are_clamped() {
        let a = assign_alphas(&signal(&[0.0, 1.0, -4.0]), None).unwrap();
        assert_eq!(a.diagnostics[&0].s, SCORE_FLOOR.ln());
        assert_eq!(a.per_layer[&0], a.per_layer[&2]);
        assert_eq!(a.per_layer[&1], 0.5);
        assert!(assign_alphas(&signal(&[f64::NAN, 1.0]), None).is_err());
        assert!(matches!(assign_alphas(&signal(&[]), None), Err(Error::EmptyCoefficientSet)));
    }

    #[test]
    fn even_count_median_averages_the_middle_pair() {
        let raw = [1.0, std::f64::consts::E, std::f64::consts::E.powi(3), std::f64::consts::E.powi(10)];
        let a = assign_alphas(&signal(&raw), None).unwrap();
        assert!((a.diagnostics[&0].s_tilde + 2.0).abs() < 1e-12);
    }

    #[test]
    fn theta_override_is_used() {
        let a = assign_alphas(&signal(&[1.0, 10.0, 100.0]), Some(0.2)).unwrap();
        assert_eq!(a.theta_adapt, 0.2);
        let s_min = a.diagnostics[&0].s_tilde - a.diagnostics[&2].s_tilde;
        assert!((a.per_layer[&0] - (1.0 - sigmoid(0.2 * s_min))).abs() < 1e-15);
        assert!(assign_alphas(&signal(&[1.0, 2.0]), Some(-1.0)).is_err());
    }

    #[test]
    fn delta_norm_means_and_frobenius() {
        let mut delta = TensorArchive::new();
        delta.insert("model.layers.0.mlp.up_proj.weight", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        delta.insert("model.layers.1.mlp.up_proj.weight", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        delta.insert("model.embed_tokens.weight", Tensor::new(vec![1], vec![100.0]).unwrap()).unwrap();
        let topo = parse_topology(&delta, &NamingScheme::default()).unwrap();
        let msq = delta_layer_norms(&delta, &topo).unwrap();
        assert_eq!(msq[&0], 12.5);
        assert_eq!(msq[&1], 0.0);
        assert_eq!(delta_layer_frobenius(&delta, &topo).unwrap()[&0], 5.0);

        let fim: BTreeMap<usize, f64> = [(0, 2.0), (1, 1.0)].into();
        let s = ImportanceSignal::build(SignalKind::FimTimesDeltaSq, &fim, &delta, &topo).unwrap();
        assert_eq!(s.per_layer_raw[&0], 25.0);
        let s = ImportanceSignal::build(SignalKind::FimOnly, &fim, &delta, &topo).unwrap();
        assert_eq!(s.per_layer_raw[&1], 1.0);
        let missing: BTreeMap<usize, f64> = [(0, 2.0)].into();
        assert!(ImportanceSignal::build(SignalKind::FimOnly, &missing, &delta, &topo).is_err());
    }

    #[test]
    fn signal_names_accept_cli_aliases() {
        let k: SignalKind = serde_json::from_str("\"fim_x_delta\"").unwrap();
        assert_eq!(k, SignalKind::FimTimesDeltaSq);
        let k: SignalKind = serde_json::from_str("\"delta_norm\"").unwrap();
        assert_eq!(k, SignalKind::DeltaNormOnly);
    }

    proptest! {
        #[test]
        fn laws_hold_for_random_scores(
            logs in prop::collection::vec(-20.0f64..20.0, 2..40),
            log_c in -10.0f64..10.0,
        ) {
            let raw: Vec<f64> = logs.iter().map(|x| x.exp()).collect();
            let a = assign_alphas(&signal(&raw), None).unwrap();
            let scaled: Vec<f64> = raw.iter().map(|x| x * log_c.exp()).collect();
            let b = assign_alphas(&signal(&scaled), None).unwrap();
            for l in a.per_layer.keys() {
                prop_assert!((a.per_layer[l] - b.per_layer[l]).abs() <= 1e-12);
                let al = a.per_layer[l];
                prop_assert!((0.5..=ALPHA_MIN_LAYER + 1e-12).contains(&al));
            }
            if a.log_range > DEGENERATE_RANGE {
                let argmax = (0..raw.len()).max_by(|&i, &j| raw[i].total_cmp(&raw[j])).unwrap();
                let argmin = (0..raw.len()).min_by(|&i, &j| raw[i].total_cmp(&raw[j])).unwrap();
                prop_assert_eq!(a.per_layer[&argmax], 0.5);
                prop_assert!((a.per_layer[&argmin] - ALPHA_MIN_LAYER).abs() <= 1e-12);
            }
            for i in 0..raw.len() {
                for j in 0..raw.len() {
                    if raw[i] >= raw[j] {
                        prop_assert!(a.per_layer[&i] <= a.per_layer[&j]);
                    }
                }
            }
            let mut st: Vec<f64> = a.diagnostics.values().map(|d| d.s_tilde).collect();
            st.sort_by(f64::total_cmp);
            prop_assert!(median(&st).abs() <= 1e-12);
        }
    }
}
