//! Agreement between the empirical diagonal Fisher and the diagonal Hessian
//! of the training loss near an optimum.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::spearman;
use crate::error::{Error, Result};
use crate::model::corpus::{affine_corpus, sample_from_model};
use crate::model::{train_to_convergence, MicroModel, MicroModelConfig, TrainOptions, TrainReport};
use crate::topology::{parse_topology, ModelTopology, NamingScheme};

/// Loss that decomposes into per-sample negative log-likelihoods; the
/// training objective is their mean.
pub trait SampleLoss: Sync {
    fn dim(&self) -> usize;
    fn n_samples(&self) -> usize;
    fn sample_gradient(&self, x: &[f64], i: usize) -> Result<Vec<f64>>;
}

/// Gradient of the mean loss, reduced in sample order.
pub fn mean_gradient<L: SampleLoss>(loss: &L, x: &[f64]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; loss.dim()];
    for i in 0..loss.n_samples() {
        for (a, g) in acc.iter_mut().zip(loss.sample_gradient(x, i)?) {
            *a += g;
        }
    }
    let n = loss.n_samples() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Mean over samples of squared per-sample gradients at `coords`.
pub fn diag_empirical_fisher<L: SampleLoss>(loss: &L, x: &[f64], coords: &[usize]) -> Result<Vec<f64>> {
    let grads = (0..loss.n_samples())
        .into_par_iter()
        .map(|i| loss.sample_gradient(x, i))
        .collect::<Result<Vec<_>>>()?;
    let n = grads.len() as f64;
    Ok(coords
        .iter()
        .map(|&c| grads.iter().map(|g| g[c] * g[c]).sum::<f64>() / n)
        .collect())
}

/// Central differences of the mean-loss gradient along each coordinate.
pub fn diag_hessian_fd<L: SampleLoss>(loss: &L, x: &[f64], coords: &[usize], h: f64) -> Result<Vec<f64>> {
    coords
        .par_iter()
        .map(|&c| {
            let mut p = x.to_vec();
            p[c] = x[c] + h;
            let up = mean_gradient(loss, &p)?[c];
            p[c] = x[c] - h;
            let down = mean_gradient(loss, &p)?[c];
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Mean of `|f - h| / |h|` over entries.
pub fn mean_relative_gap(fisher: &[f64], hessian: &[f64]) -> f64 {
    let total: f64 = fisher
        .iter()
        .zip(hessian)
        .map(|(f, h)| (f - h).abs() / h.abs().max(f64::MIN_POSITIVE))
        .sum();
    total / fisher.len().max(1) as f64
}

/// Softmax regression on one-hot features: `p(y | k) = softmax(W[:, k])`.
/// Parameter `W[c, k]` lives at index `k * classes + c`.
#[derive(Debug, Clone)]
pub struct SoftmaxToy {
    pub features: usize,
    pub classes: usize,
    /// `(feature, label)` pairs.
    pub data: Vec<(usize, usize)>,
}

impl SoftmaxToy {
    /// Dataset in which every (feature, label) pair occurs at least once, so
    /// the maximum-likelihood solution is finite.
    pub fn with_counts(features: usize, classes: usize, count: impl Fn(usize, usize) -> usize) -> Result<Self> {
        let mut data = Vec::new();
        for k in 0..features {
            for c in 0..classes {
                let m = count(k, c);
                if m == 0 {
                    return Err(Error::InvalidArgument(format!("pair ({k}, {c}) has zero count")));
                }
                data.extend(std::iter::repeat_n((k, c), m));
            }
        }
        Ok(Self { features, classes, data })
    }

    fn counts(&self) -> Vec<Vec<usize>> {
        let mut n = vec![vec![0; self.classes]; self.features];
        for &(k, c) in &self.data {
            n[k][c] += 1;
        }
        n
    }

    /// `W[c, k] = ln(n_kc / n_k)`.
    pub fn mle(&self) -> Vec<f64> {
        let counts = self.counts();
        let mut w = vec![0.0; self.features * self.classes];
        for (k, row) in counts.iter().enumerate() {
            let nk: usize = row.iter().sum();
            for (c, &m) in row.iter().enumerate() {
                w[k * self.classes + c] = (m as f64 / nk as f64).ln();
            }
        }
        w
    }

    fn probs(&self, w: &[f64], k: usize) -> Vec<f64> {
        let logits = &w[k * self.classes..(k + 1) * self.classes];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.iter().map(|e| e / z).collect()
    }

    /// Analytic diagonal Hessian of the mean NLL: `(n_k / N) p_kc (1 - p_kc)`.
    pub fn closed_form_diag_hessian(&self, w: &[f64]) -> Vec<f64> {
        let counts = self.counts();
        let n = self.data.len() as f64;
        let mut out = vec![0.0; w.len()];
        for (k, row) in counts.iter().enumerate() {
            let share = row.iter().sum::<usize>() as f64 / n;
            for (c, p) in self.probs(w, k).into_iter().enumerate() {
                out[k * self.classes + c] = share * p * (1.0 - p);
            }
        }
        out
    }
}

impl SampleLoss for SoftmaxToy {
    fn dim(&self) -> usize {
        self.features * self.classes
    }

    fn n_samples(&self) -> usize {
        self.data.len()
    }

    fn sample_gradient(&self, w: &[f64], i: usize) -> Result<Vec<f64>> {
        let (k, y) = self.data[i];
        let mut g = vec![0.0; self.dim()];
        for (c, p) in self.probs(w, k).into_iter().enumerate() {
            g[k * self.classes + c] = p - if c == y { 1.0 } else { 0.0 };
        }
        Ok(g)
    }
}

/// Sequence-level NLL (summed over predicted positions) of a corpus under
/// the micro model.
pub struct SequenceLoss<'a> {
    pub model: &'a MicroModel,
    pub corpus: &'a [Vec<usize>],
}

impl SampleLoss for SequenceLoss<'_> {
    fn dim(&self) -> usize {
        self.model.n_params()
    }

    fn n_samples(&self) -> usize {
        self.corpus.len()
    }

    fn sample_gradient(&self, x: &[f64], i: usize) -> Result<Vec<f64>> {
        let seq = &self.corpus[i];
        let positions = (seq.len() - 1) as f64;
        let g = self.model.backward_nll_at(x, seq)?;
        Ok(g.flat.into_iter().map(|v| v * positions).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherCheckOptions {
    /// Coordinates sampled from every coefficient-set tensor.
    pub coords_per_tensor: usize,
    pub seed: u64,
    pub hessian_step: f64,
}

impl Default for FisherCheckOptions {
    fn default() -> Self {
        Self {
            coords_per_tensor: 8,
            seed: 42,
            hessian_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub name: String,
    pub layer_index: usize,
    pub fisher_mean: f64,
    pub hessian_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherHessianReport {
    pub groups: Vec<GroupComparison>,
    /// `(fisher_mean, hessian_mean)` per layer.
    pub per_layer: BTreeMap<usize, (f64, f64)>,
    /// Spearman correlation across coefficient-set tensors.
    pub tensor_rank_correlation: Option<f64>,
    /// Spearman correlation across layers.
    pub per_layer_rank_correlation: Option<f64>,
    pub mean_relative_gap: f64,
    /// Norm of the mean-NLL gradient at the evaluated point.
    pub grad_norm: f64,
}

/// Compare per-tensor and per-layer means of the empirical diagonal Fisher
/// against the finite-difference diagonal Hessian on sampled coordinates.
pub fn fisher_hessian_check(
    model: &MicroModel,
    corpus: &[Vec<usize>],
    topology: &ModelTopology,
    opts: &FisherCheckOptions,
) -> Result<FisherHessianReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut spans = Vec::new();
    let mut coords = Vec::new();
    for layer in topology.coefficient_layers() {
        for name in topology.coefficient_params(layer) {
            let slot = model
                .layout()
                .slot(name)
                .ok_or_else(|| Error::Misaligned(format!("model has no parameter `{name}`")))?;
            let k = opts.coords_per_tensor.min(slot.len);
            let start = coords.len();
            let mut picked = index::sample(&mut rng, slot.len, k).into_vec();
            picked.sort_unstable();
            coords.extend(picked.into_iter().map(|i| slot.offset + i));
            spans.push((name.to_string(), layer, start..coords.len()));
        }
    }
    if spans.is_empty() {
        return Err(Error::EmptyCoefficientSet);
    }

    let loss = SequenceLoss { model, corpus };
    let x = model.params();
    let fisher = diag_empirical_fisher(&loss, x, &coords)?;
    let hessian = diag_hessian_fd(&loss, x, &coords, opts.hessian_step)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let groups: Vec<GroupComparison> = spans
        .iter()
        .map(|(name, layer, r)| GroupComparison {
            name: name.clone(),
            layer_index: *layer,
            fisher_mean: mean(&fisher[r.clone()]),
            hessian_mean: mean(&hessian[r.clone()]),
        })
        .collect();
    let mut per_layer = BTreeMap::new();
    for layer in topology.coefficient_layers() {
        let idx: Vec<usize> = spans
            .iter()
            .filter(|s| s.1 == layer)
            .flat_map(|s| s.2.clone())
            .collect();
        let f: Vec<f64> = idx.iter().map(|&i| fisher[i]).collect();
        let h: Vec<f64> = idx.iter().map(|&i| hessian[i]).collect();
        per_layer.insert(layer, (mean(&f), mean(&h)));
    }
    let gf: Vec<f64> = groups.iter().map(|g| g.fisher_mean).collect();
    let gh: Vec<f64> = groups.iter().map(|g| g.hessian_mean).collect();
    let lf: Vec<f64> = per_layer.values().map(|v| v.0).collect();
    let lh: Vec<f64> = per_layer.values().map(|v| v.1).collect();
    let n_positions = corpus.iter().map(|s| s.len() - 1).sum::<usize>() as f64 / corpus.len() as f64;
    let grad = mean_gradient(&loss, x)?;
    Ok(FisherHessianReport {
        tensor_rank_correlation: spearman(&gf, &gh).ok(),
        per_layer_rank_correlation: spearman(&lf, &lh).ok(),
        mean_relative_gap: mean_relative_gap(&gf, &gh),
        grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt() / n_positions,
        groups,
        per_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellSpecifiedOptions {
    pub model: MicroModelConfig,
    /// Synthetic rule `(mult, add)` the model is first trained on.
    pub rule: (usize, usize),
    pub rule_noise: f64,
    pub train_sequences: usize,
    pub train: TrainOptions,
    /// Size of the corpus sampled from the trained model for the check.
    pub n_sequences: usize,
    pub seq_len: usize,
    pub corpus_seed: u64,
    /// Optional further descent on the sampled corpus.
    pub refit: TrainOptions,
}

impl Default for WellSpecifiedOptions {
    fn default() -> Self {
        Self {
            model: MicroModelConfig::default(),
            rule: (1, 1),
            rule_noise: 0.1,
            train_sequences: 32,
            train: TrainOptions { steps: 200, lr: 0.5, grad_tol: 1e-6 },
            n_sequences: 64,
            seq_len: 16,
            corpus_seed: 7,
            refit: TrainOptions { steps: 0, lr: 0.5, grad_tol: 1e-6 },
        }
    }
}

pub struct WellSpecifiedFit {
    pub model: MicroModel,
    pub corpus: Vec<Vec<usize>>,
    pub train: TrainReport,
    pub refit: TrainReport,
}

/// Train the model on a synthetic rule, then sample the check corpus from
/// the trained model itself. The trained parameters are the population
/// optimum of the sampled distribution, so the likelihood is correctly
/// specified there.
pub fn well_specified_fit(opts: &WellSpecifiedOptions) -> Result<WellSpecifiedFit> {
    let init = MicroModel::new(opts.model.clone())?;
    let (mult, add) = opts.rule;
    let rule_corpus = affine_corpus(
        opts.model.vocab_size,
        opts.train_sequences,
        opts.model.seq_len.min(32),
        mult,
        add,
        opts.rule_noise,
        opts.corpus_seed ^ 0x5eed,
    );
    let (trained, train) = train_to_convergence(&init, &rule_corpus, &opts.train)?;
    let corpus = sample_from_model(&trained, opts.n_sequences, opts.seq_len, opts.corpus_seed)?;
    let (model, refit) = train_to_convergence(&trained, &corpus, &opts.refit)?;
    Ok(WellSpecifiedFit { model, corpus, train, refit })
}

/// [`well_specified_fit`] followed by [`fisher_hessian_check`].
pub fn trained_fisher_check(
    fit_opts: &WellSpecifiedOptions,
    check_opts: &FisherCheckOptions,
) -> Result<(FisherHessianReport, TrainReport)> {
    let fit = well_specified_fit(fit_opts)?;
    let topology = parse_topology(&fit.model.to_archive(), &NamingScheme::default())?;
    let report = fisher_hessian_check(&fit.model, &fit.corpus, &topology, check_opts)?;
    Ok((report, fit.train))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SoftmaxToy {
        SoftmaxToy::with_counts(4, 3, |k, c| 1 + (3 * k + 5 * c) % 7).unwrap()
    }

    #[test]
    fn toy_mle_is_stationary() {
        let t = toy();
        let g = mean_gradient(&t, &t.mle()).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn toy_fisher_equals_hessian_at_the_mle() {
        let t = toy();
        let w = t.mle();
        let coords: Vec<usize> = (0..t.dim()).collect();
        let fisher = diag_empirical_fisher(&t, &w, &coords).unwrap();
        let hessian = diag_hessian_fd(&t, &w, &coords, 1e-4).unwrap();
        let exact = t.closed_form_diag_hessian(&w);
        for ((f, h), e) in fisher.iter().zip(&hessian).zip(&exact) {
            assert!((f - e).abs() < 1e-12 * e);
            assert!((h - e).abs() < 1e-7 * e);
        }
        assert!(mean_relative_gap(&fisher, &hessian) < 1e-3);
    }

    #[test]
    fn toy_fisher_and_hessian_disagree_away_from_the_mle() {
        let t = toy();
        let w = vec![0.0; t.dim()];
        let coords: Vec<usize> = (0..t.dim()).collect();
        let fisher = diag_empirical_fisher(&t, &w, &coords).unwrap();
        let hessian = diag_hessian_fd(&t, &w, &coords, 1e-4).unwrap();
        assert!(mean_relative_gap(&fisher, &hessian) > 1e-2);
    }

    #[test]
    fn zero_counts_are_rejected() {
        assert!(SoftmaxToy::with_counts(2, 2, |k, _| k).is_err());
    }

    #[test]
    fn untrained_model_check_runs() {
        let cfg = MicroModelConfig { n_layers: 2, ..MicroModelConfig::default() };
        let model = MicroModel::new(cfg).unwrap();
        let corpus = crate::model::corpus::uniform_sequences(64, 4, 8, 1);
        let topology = parse_topology(&model.to_archive(), &NamingScheme::default()).unwrap();
        let opts = FisherCheckOptions { coords_per_tensor: 2, ..FisherCheckOptions::default() };
        let r = fisher_hessian_check(&model, &corpus, &topology, &opts).unwrap();
        assert_eq!(r.groups.len(), 14);
        assert_eq!(r.per_layer.len(), 2);
        assert!(r.grad_norm > 0.0);
    }
}
