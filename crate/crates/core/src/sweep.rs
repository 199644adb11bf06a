//! Sensitivity sweeps on the micro pipeline: fixed sharpness, importance
//! signal, and Fisher sample count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alpha::{assign_alphas, ImportanceSignal, SignalKind};
use crate::error::Result;
use crate::fim::{estimate_fim_with, FimOptions, FimScores};
use crate::merge::{merge, task_vector, MergeMethod, MergePlan};
use crate::model::corpus::affine_corpus;
use crate::model::{MicroModel, MicroModelConfig};
use crate::theory::nl::{train_pair, PairOptions};
use crate::theory::stats::spearman;
use crate::topology::{parse_topology, ModelTopology, NamingScheme};
use crate::TensorArchive;

/// Trained pair, its Fisher estimate and held-out corpora for both rules.
pub struct SweepContext {
    pub base: MicroModel,
    pub tuned: MicroModel,
    pub fim: FimScores,
    pub topology: ModelTopology,
    pub delta: TensorArchive,
    pub eval_base_task: Vec<Vec<usize>>,
    pub eval_tuned_task: Vec<Vec<usize>>,
}

impl SweepContext {
    pub fn build(config: MicroModelConfig, pair: &PairOptions, fim: &FimOptions) -> Result<Self> {
        let init = MicroModel::new(config)?;
        let trained = train_pair(&init, pair)?;
        let topology = parse_topology(&trained.base.to_archive(), &NamingScheme::default())?;
        let fim = estimate_fim_with(&trained.base, fim, &topology)?;
        let delta = task_vector(&trained.base.to_archive(), &trained.tuned.to_archive())?;
        let vocab = init.config().vocab_size;
        let held_out = |(m, a): (usize, usize), seed: u64| {
            affine_corpus(vocab, pair.n_sequences, pair.seq_len, m, a, pair.noise, seed)
        };
        Ok(Self {
            eval_base_task: held_out(pair.base_rule, pair.corpus_seed.wrapping_add(100)),
            eval_tuned_task: held_out(pair.tuned_rule, pair.corpus_seed.wrapping_add(101)),
            base: trained.base,
            tuned: trained.tuned,
            fim,
            topology,
            delta,
        })
    }

    fn mean_nll(&self, archive: &TensorArchive, corpus: &[Vec<usize>]) -> Result<f64> {
        let model = MicroModel::from_archive(self.base.config().clone(), archive)?;
        let total = corpus.iter().map(|s| model.forward_nll(s)).sum::<Result<f64>>()?;
        Ok(total / corpus.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub theta: f64,
    pub log_range: f64,
    pub alphas: BTreeMap<usize, f64>,
    /// Held-out mean NLL of the merged model on the base rule.
    pub nll_base_task: f64,
    /// Held-out mean NLL of the merged model on the fine-tuning rule.
    pub nll_tuned_task: f64,
}

fn run_point(
    ctx: &SweepContext,
    template: &MergePlan,
    kind: SignalKind,
    theta: Option<f64>,
    label: String,
) -> Result<SweepPoint> {
    let signal = ImportanceSignal::build(kind, &ctx.fim.per_layer, &ctx.delta, &ctx.topology)?;
    let alphas = assign_alphas(&signal, theta)?;
    let plan = MergePlan { alphas: alphas.clone(), ..template.clone() };
    let (merged, _) = merge(
        &ctx.base.to_archive(),
        &ctx.tuned.to_archive(),
        &plan,
        Some(&ctx.fim),
        &ctx.topology,
    )?;
    Ok(SweepPoint {
        label,
        theta: alphas.theta_adapt,
        log_range: alphas.log_range,
        alphas: alphas.per_layer,
        nll_base_task: ctx.mean_nll(&merged, &ctx.eval_base_task)?,
        nll_tuned_task: ctx.mean_nll(&merged, &ctx.eval_tuned_task)?,
    })
}

/// Template plan for sweeps: FIM-TIES with the small-model trim ratio.
pub fn default_template() -> MergePlan {
    MergePlan::new(MergeMethod::FimTies, crate::alpha::AlphaAssignment::uniform([], 0.5))
}

/// Adaptive sharpness first, then each fixed value in `thetas`.
pub fn theta_sweep(ctx: &SweepContext, template: &MergePlan, thetas: &[f64]) -> Result<Vec<SweepPoint>> {
    let mut out = vec![run_point(ctx, template, SignalKind::FimTimesDeltaSq, None, "adaptive".into())?];
    for &t in thetas {
        out.push(run_point(ctx, template, SignalKind::FimTimesDeltaSq, Some(t), format!("theta={t}"))?);
    }
    Ok(out)
}

/// One point per importance signal, all with adaptive sharpness.
pub fn signal_sweep(ctx: &SweepContext, template: &MergePlan) -> Result<Vec<SweepPoint>> {
    [SignalKind::FimTimesDeltaSq, SignalKind::FimOnly, SignalKind::DeltaNormOnly]
        .into_iter()
        .map(|k| {
            let label = serde_json::to_value(k).expect("enum serializes");
            run_point(ctx, template, k, None, label.as_str().unwrap_or_default().to_string())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FimSamplePoint {
    pub n_samples: usize,
    pub per_layer: BTreeMap<usize, f64>,
    /// Spearman correlation with the largest sample count in the sweep.
    pub rank_correlation_with_largest: Option<f64>,
}

/// Per-layer Fisher at each sample count, all drawn from the same seed.
pub fn fim_sample_sweep(
    model: &MicroModel,
    topology: &ModelTopology,
    counts: &[usize],
    base: &FimOptions,
) -> Result<Vec<FimSamplePoint>> {
    let runs = counts
        .iter()
        .map(|&n| {
            let opts = FimOptions { n_samples: n, ..base.clone() };
            Ok((n, estimate_fim_with(model, &opts, topology)?.per_layer))
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = runs.iter().max_by_key(|r| r.0).map(|r| r.1.values().copied().collect::<Vec<_>>());
    Ok(runs
        .into_iter()
        .map(|(n, per_layer)| {
            let xs: Vec<f64> = per_layer.values().copied().collect();
            FimSamplePoint {
                n_samples: n,
                rank_correlation_with_largest: reference.as_ref().and_then(|r| spearman(&xs, r).ok()),
                per_layer,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrainOptions;

    fn small_context() -> SweepContext {
        let cfg = MicroModelConfig { n_layers: 3, seq_len: 16, ..MicroModelConfig::default() };
        let pair = PairOptions {
            n_sequences: 8,
            seq_len: 16,
            base_train: TrainOptions { steps: 20, lr: 0.5, grad_tol: 0.0 },
            tuned_train: TrainOptions { steps: 20, lr: 0.5, grad_tol: 0.0 },
            ..PairOptions::default()
        };
        let fim = FimOptions { n_samples: 4, seq_len: 16, ..FimOptions::default() };
        SweepContext::build(cfg, &pair, &fim).unwrap()
    }

    #[test]
    fn sweeps_cover_every_setting() {
        let ctx = small_context();
        let template = default_template();
        let thetas = theta_sweep(&ctx, &template, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(thetas.len(), 4);
        assert_eq!(thetas[2].theta, 0.2);
        assert!(thetas.iter().all(|p| p.nll_base_task.is_finite() && p.nll_tuned_task.is_finite()));
        let signals = signal_sweep(&ctx, &template).unwrap();
        let labels: Vec<&str> = signals.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["fim_times_delta_sq", "fim_only", "delta_norm_only"]);
    }

    #[test]
    fn fim_sweep_reports_agreement_with_the_largest_count() {
        let model = MicroModel::new(MicroModelConfig { n_layers: 3, ..MicroModelConfig::default() }).unwrap();
        let topo = parse_topology(&model.to_archive(), &NamingScheme::default()).unwrap();
        let base = FimOptions { seq_len: 16, ..FimOptions::default() };
        let pts = fim_sample_sweep(&model, &topo, &[1, 4], &base).unwrap();
        assert!((pts[1].rank_correlation_with_largest.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pts[0].per_layer.len(), 3);
    }
}
