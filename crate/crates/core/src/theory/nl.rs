//! Per-layer nonlinearity score and its relation to merge error.

use serde::{Deserialize, Serialize};

use super::bound::interpolation_residual;
use super::objective::{MicroTokenLogProbs, VectorObjective};
use super::stats::pearson;
use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::model::corpus::uniform_sequences;
use crate::model::{MicroModel, TrainOptions, TrainReport};
use crate::topology::ModelTopology;

/// Denominators below this leave the ratio undefined.
pub const MIN_OUTPUT_CHANGE: f64 = 1e-12;

/// Interpolation residual over total output change for one vector
/// objective; `None` when the output barely moves.
pub fn nl_ratio<O: VectorObjective>(obj: &O, theta0: &[f64], delta: &[f64], alpha: f64) -> Result<Option<f64>> {
    let (num, den) = interpolation_residual(obj, theta0, delta, alpha)?;
    Ok((den >= MIN_OUTPUT_CHANGE).then(|| num / den))
}

/// Flat task vector with every entry outside `layer` zeroed.
pub fn layer_delta(model: &MicroModel, delta: &TensorArchive, topology: &ModelTopology, layer: usize) -> Result<Vec<f64>> {
    let mut flat = vec![0.0; model.n_params()];
    let mut any = false;
    for name in topology.layer_params(layer) {
        let slot = model
            .layout()
            .slot(name)
            .ok_or_else(|| Error::Misaligned(format!("model has no parameter `{name}`")))?;
        let t = delta
            .get(name)
            .ok_or_else(|| Error::Misaligned(format!("task vector lacks `{name}`")))?;
        if t.numel() != slot.len {
            return Err(Error::Misaligned(format!("`{name}` size differs from the model")));
        }
        for (dst, &v) in flat[slot.offset..slot.offset + slot.len].iter_mut().zip(t.data()) {
            *dst = v as f64;
        }
        any = true;
    }
    if !any {
        return Err(Error::InvalidArgument(format!("layer {layer} has no parameters")));
    }
    Ok(flat)
}

/// Mean over probes of the per-probe ratio, with `f` the vector of
/// per-position target log-probabilities.
pub fn nl_score(
    base: &MicroModel,
    delta: &TensorArchive,
    topology: &ModelTopology,
    layer: usize,
    alpha: f64,
    probes: &[Vec<usize>],
) -> Result<Option<f64>> {
    let d = layer_delta(base, delta, topology, layer)?;
    let mut total = 0.0;
    for p in probes {
        let obj = MicroTokenLogProbs { model: base, probe: p };
        match nl_ratio(&obj, base.params(), &d, alpha)? {
            Some(r) => total += r,
            None => return Ok(None),
        }
    }
    Ok(Some(total / probes.len() as f64))
}

/// Residual norm over output-change norm with all probes' outputs pooled
/// into one vector.
pub fn relative_merge_error(
    base: &MicroModel,
    delta: &TensorArchive,
    topology: &ModelTopology,
    layer: usize,
    alpha: f64,
    probes: &[Vec<usize>],
) -> Result<Option<f64>> {
    let d = layer_delta(base, delta, topology, layer)?;
    let (mut num, mut den) = (0.0, 0.0);
    for p in probes {
        let obj = MicroTokenLogProbs { model: base, probe: p };
        let (n, dd) = interpolation_residual(&obj, base.params(), &d, alpha)?;
        num += n * n;
        den += dd * dd;
    }
    let den = den.sqrt();
    Ok((den >= MIN_OUTPUT_CHANGE).then(|| num.sqrt() / den))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlRecord {
    pub layer_index: usize,
    pub nl_score: Option<f64>,
    pub relative_merge_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlAnalysis {
    pub alpha: f64,
    pub n_probes: usize,
    pub seed: u64,
    /// Seed of the separate probe set used for the relative error.
    pub error_seed: u64,
    pub records: Vec<NlRecord>,
    /// Pearson r between the two columns over layers where both are defined.
    pub pearson: Option<f64>,
}

/// NL score and relative merge error for every layer with parameters.
pub fn analyze_nl(
    base: &MicroModel,
    tuned: &MicroModel,
    topology: &ModelTopology,
    alpha: f64,
    n_probes: usize,
    seed: u64,
) -> Result<NlAnalysis> {
    if n_probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    if base.config() != tuned.config() {
        return Err(Error::Misaligned("base and tuned configurations differ".into()));
    }
    let delta = crate::merge::task_vector(&base.to_archive(), &tuned.to_archive())?;
    let cfg = base.config();
    let error_seed = seed.wrapping_add(1);
    let probes = uniform_sequences(cfg.vocab_size, n_probes, cfg.seq_len, seed);
    let error_probes = uniform_sequences(cfg.vocab_size, n_probes, cfg.seq_len, error_seed);
    let mut layers: Vec<usize> = topology.records.values().filter_map(|r| r.layer_index).collect();
    layers.sort_unstable();
    layers.dedup();
    let records = layers
        .iter()
        .map(|&l| {
            Ok(NlRecord {
                layer_index: l,
                nl_score: nl_score(base, &delta, topology, l, alpha, &probes)?,
                relative_merge_error: relative_merge_error(base, &delta, topology, l, alpha, &error_probes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| Some((r.nl_score?, r.relative_merge_error?)))
        .unzip();
    Ok(NlAnalysis {
        alpha,
        n_probes,
        seed,
        error_seed,
        pearson: pearson(&xs, &ys).ok(),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOptions {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub noise: f64,
    pub corpus_seed: u64,
    /// `(mult, add)` of the base corpus rule.
    pub base_rule: (usize, usize),
    /// `(mult, add)` of the fine-tuning corpus rule.
    pub tuned_rule: (usize, usize),
    pub base_train: TrainOptions,
    pub tuned_train: TrainOptions,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            n_sequences: 32,
            seq_len: 32,
            noise: 0.1,
            corpus_seed: 11,
            base_rule: (1, 1),
            tuned_rule: (5, 3),
            base_train: TrainOptions { steps: 200, lr: 0.5, grad_tol: 1e-6 },
            tuned_train: TrainOptions { steps: 100, lr: 0.5, grad_tol: 1e-6 },
        }
    }
}

pub struct TrainedPair {
    pub base: MicroModel,
    pub tuned: MicroModel,
    pub base_report: TrainReport,
    pub tuned_report: TrainReport,
}

/// Base = trained from `init` on one synthetic rule; tuned = base further
/// trained on a second rule.
pub fn train_pair(init: &MicroModel, opts: &PairOptions) -> Result<TrainedPair> {
    use crate::model::corpus::affine_corpus;
    use crate::model::train_to_convergence;
    let vocab = init.config().vocab_size;
    let (bm, ba) = opts.base_rule;
    let (tm, ta) = opts.tuned_rule;
    let corpus_a = affine_corpus(vocab, opts.n_sequences, opts.seq_len, bm, ba, opts.noise, opts.corpus_seed);
    let corpus_b = affine_corpus(vocab, opts.n_sequences, opts.seq_len, tm, ta, opts.noise, opts.corpus_seed ^ 1);
    let (base, base_report) = train_to_convergence(init, &corpus_a, &opts.base_train)?;
    let (tuned, tuned_report) = train_to_convergence(&base, &corpus_b, &opts.tuned_train)?;
    Ok(TrainedPair { base, tuned, base_report, tuned_report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MicroModelConfig;
    use crate::theory::objective::LinearMap;
    use crate::topology::{parse_topology, NamingScheme};

    #[test]
    fn linear_map_has_zero_nl() {
        let f = LinearMap { rows: 2, a: vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0] };
        let r = nl_ratio(&f, &[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5], 0.5).unwrap().unwrap();
        assert!(r < 1e-15);
    }

    #[test]
    fn zero_change_is_undefined() {
        let f = LinearMap { rows: 1, a: vec![1.0, 1.0] };
        assert_eq!(nl_ratio(&f, &[0.0, 0.0], &[1.0, -1.0], 0.5).unwrap(), None);
    }

    #[test]
    fn endpoints_and_rescaling() {
        let cfg = MicroModelConfig { n_layers: 2, ..MicroModelConfig::default() };
        let base = MicroModel::new(cfg.clone()).unwrap();
        let tuned = MicroModel::new(MicroModelConfig { seed: 5, ..cfg }).unwrap();
        let topo = parse_topology(&base.to_archive(), &NamingScheme::default()).unwrap();
        let delta = crate::merge::task_vector(&base.to_archive(), &tuned.to_archive()).unwrap();
        let probes = uniform_sequences(64, 2, 16, 3);
        for a in [0.0, 1.0] {
            assert_eq!(nl_score(&base, &delta, &topo, 1, a, &probes).unwrap(), Some(0.0));
        }
        let mid = nl_score(&base, &delta, &topo, 1, 0.5, &probes).unwrap().unwrap();
        assert!(mid > 0.0);

        struct Scaled<'a>(MicroTokenLogProbs<'a>);
        impl VectorObjective for Scaled<'_> {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
                Ok(self.0.outputs(x)?.into_iter().map(|v| 8.0 * v).collect())
            }
        }
        let d = layer_delta(&base, &delta, &topo, 0).unwrap();
        let plain = MicroTokenLogProbs { model: &base, probe: &probes[0] };
        let a = nl_ratio(&plain, base.params(), &d, 0.5).unwrap().unwrap();
        let b = nl_ratio(&Scaled(MicroTokenLogProbs { model: &base, probe: &probes[0] }), base.params(), &d, 0.5)
            .unwrap()
            .unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn layer_delta_touches_only_that_layer() {
        let cfg = MicroModelConfig { n_layers: 2, ..MicroModelConfig::default() };
        let base = MicroModel::new(cfg.clone()).unwrap();
        let tuned = MicroModel::new(MicroModelConfig { seed: 9, ..cfg }).unwrap();
        let topo = parse_topology(&base.to_archive(), &NamingScheme::default()).unwrap();
        let delta = crate::merge::task_vector(&base.to_archive(), &tuned.to_archive()).unwrap();
        let d = layer_delta(&base, &delta, &topo, 1).unwrap();
        for slot in base.layout().slots() {
            let in_layer = slot.name.contains("layers.1.");
            let seg = &d[slot.offset..slot.offset + slot.len];
            let src = delta.get(&slot.name).unwrap().data();
            for (&x, &y) in seg.iter().zip(src) {
                assert_eq!(x, if in_layer { y as f64 } else { 0.0 }, "{}", slot.name);
            }
        }
    }
}
