use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fimmerge_core::alpha::{assign_alphas, ImportanceSignal, SignalKind};
use fimmerge_core::fim::{estimate_fim_with, export_fim, import_fim, FimOptions, Reduction};
use fimmerge_core::io::{atomic_write, read_json, write_json};
use fimmerge_core::linalg::SymMatrix;
use fimmerge_core::merge::{merge, task_vector, MergeMethod, MergePlan};
use fimmerge_core::theory::bound::{
    alpha_grid, quadratic_coefficient_check, sample_trial, verify_bound, VerifyOptions,
};
use fimmerge_core::theory::fisher::{
    diag_empirical_fisher, diag_hessian_fd, mean_relative_gap, trained_fisher_check, FisherCheckOptions,
    SampleLoss, SoftmaxToy, WellSpecifiedOptions,
};
use fimmerge_core::theory::nl::{analyze_nl, train_pair, PairOptions};
use fimmerge_core::theory::objective::{MicroScalar, Quadratic, Restricted};
use fimmerge_core::{
    load_archive, parse_topology, write_archive, MicroModel, MicroModelConfig, NamingScheme,
};
use fimmerge_core::sweep::{default_template, fim_sample_sweep, signal_sweep, theta_sweep, SweepContext};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::manifest::Manifest;

/// Raised when a run completed but a hard check did not hold.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn config_path_for(model: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| {
        let stem = model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        model.with_file_name(format!("{stem}.config.json"))
    })
}

fn load_micro(model: &Path, config: &Path) -> anyhow::Result<MicroModel> {
    let cfg = MicroModelConfig::load(config)?;
    let archive = load_archive(model)?;
    Ok(MicroModel::from_archive(cfg, &archive)?)
}

fn naming(path: Option<&PathBuf>) -> anyhow::Result<NamingScheme> {
    Ok(match path {
        Some(p) => NamingScheme::from_file(p)?,
        None => NamingScheme::default(),
    })
}

fn parse_signal(s: &str) -> anyhow::Result<SignalKind> {
    serde_json::from_value(json!(s)).with_context(|| format!("unknown signal `{s}`"))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn fim(cli: &Cli, args: &FimArgs) -> anyhow::Result<()> {
    let config = config_path_for(&args.model, args.arch_config.as_ref());
    let model = load_micro(&args.model, &config)?;
    let scheme = naming(args.naming.as_ref())?;
    let topology = parse_topology(&model.to_archive(), &scheme)?;
    let opts = FimOptions {
        n_samples: args.n,
        seq_len: args.seq_len,
        seed: cli.seed,
        reduction: match args.reduction {
            ReductionArg::Mean => Reduction::Mean,
            ReductionArg::Sum => Reduction::Sum,
        },
    };
    let scores = estimate_fim_with(&model, &opts, &topology)?;
    export_fim(&scores, &args.out)?;

    let mut m = Manifest::new(
        "fim",
        cli.seed,
        json!({
            "model": args.model, "arch_config": config, "n": args.n, "seq_len": args.seq_len,
            "reduction": scores.meta.reduction, "naming": args.naming, "out": args.out,
        }),
    )?;
    m.input(&args.model)?;
    m.input(&config)?;
    m.output(&args.out)?;
    m.output(&fimmerge_core::fim::elementwise_path_for(&args.out))?;
    m.summary = json!({ "model_id": scores.meta.model_id, "per_layer": scores.per_layer });
    m.write(&cli.report_dir)?;
    for (l, v) in &scores.per_layer {
        eprintln!("layer {l:>3}  fim {v:.4e}");
    }
    Ok(())
}

pub fn merge_cmd(cli: &Cli, args: &MergeArgs) -> anyhow::Result<()> {
    let base = load_archive(&args.base)?;
    let tuned = load_archive(&args.tuned)?;
    let scheme = naming(args.naming.as_ref())?;
    let topology = parse_topology(&base, &scheme)?;
    let fim = args.fim.as_ref().map(|p| import_fim(p, &scheme)).transpose()?;

    let plan = match &args.plan {
        Some(path) => {
            let plan: MergePlan = read_json(path)?;
            plan.validate()?;
            plan
        }
        None => {
            let kind = parse_signal(&args.signal)?;
            let fim_layers = match (&fim, kind) {
                (Some(f), _) => f.per_layer.clone(),
                (None, SignalKind::DeltaNormOnly) => BTreeMap::new(),
                (None, _) => bail!(fimmerge_core::Error::InvalidArgument(format!(
                    "signal `{}` needs --fim",
                    args.signal
                ))),
            };
            let delta = task_vector(&base, &tuned)?;
            let signal = ImportanceSignal::build(kind, &fim_layers, &delta, &topology)?;
            let alphas = assign_alphas(&signal, args.alpha_theta)?;
            MergePlan {
                method: args.method,
                alphas,
                trim_ratio: args.trim_ratio,
                gate_factor: args.gate_factor,
                norm_threshold: args.norm_eps.is_finite().then_some(args.norm_eps),
                probe_seed: cli.seed,
                probe_count: args.probe_count,
                trim_mode: args.trim_mode,
                allow_scalar_fim_fallback: !args.no_fim_fallback,
            }
        }
    };

    let (merged, report) = merge(&base, &tuned, &plan, fim.as_ref(), &topology)?;
    write_archive(&merged, &args.out)?;
    write_json(&args.report, &report)?;

    let mut m = Manifest::new(
        "merge",
        cli.seed,
        json!({
            "base": args.base, "tuned": args.tuned, "fim": args.fim, "plan_file": args.plan,
            "signal": args.signal, "alpha_theta": args.alpha_theta, "naming": args.naming,
            "out": args.out, "report": args.report, "plan": plan,
        }),
    )?;
    m.input(&args.base)?;
    m.input(&args.tuned)?;
    if let Some(p) = &args.fim {
        m.input(p)?;
    }
    if let Some(p) = &args.plan {
        m.input(p)?;
    }
    m.output(&args.out)?;
    m.output(&args.report)?;
    m.summary = json!({
        "plan_hash": report.plan_hash,
        "alphas": plan.alphas.per_layer,
        "log_range": plan.alphas.log_range,
        "scalar_fim_fallback": report.scalar_fim_fallback.len(),
    });
    m.write(&cli.report_dir)?;

    for (l, rec) in &report.layers {
        let kept = match plan.method {
            MergeMethod::FimTies => format!("  kept {}/{}", rec.retained, rec.total),
            MergeMethod::FimTa => String::new(),
        };
        eprintln!("layer {l:>3}  alpha {:.4}{kept}  rescaled {}", rec.alpha, rec.rescaled_tensors);
    }
    if !report.scalar_fim_fallback.is_empty() {
        eprintln!(
            "warning: {} tensors trimmed without elementwise Fisher (per-layer score x |delta|)",
            report.scalar_fim_fallback.len()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TrialRow {
    trial: usize,
    passed: bool,
    worst_ratio: f64,
    max_error: f64,
    max_bound: f64,
    delta_norm_sq: f64,
    sup_hessian_norm: f64,
    sup_argmax_t: f64,
    cubic_slack: f64,
    hessian_asymmetry: f64,
}

/// Indefinite fixture with entries depending on the seed.
fn fixture_matrix(n: usize, seed: u64) -> SymMatrix {
    let s = (seed % 97) as f64;
    SymMatrix::from_fn(n, |i, j| ((i * 7 + j * 7 + (i * j) % 5) as f64 + s).sin())
}

pub fn verify(cli: &Cli, args: &VerifyArgs) -> anyhow::Result<()> {
    let (body, failures, summary) = match args.mode {
        VerifyMode::Bound => {
            let opts = VerifyOptions {
                trials: args.trials,
                delta_scale: args.delta_scale.unwrap_or(0.1),
                seed: cli.seed,
                subset_size: args.subset_size,
                ..VerifyOptions::default()
            };
            let results = verify_bound(&opts)?;
            let passed = results.iter().filter(|r| r.passed).count();
            if let Some(csv) = &args.csv {
                let rows: Vec<TrialRow> = results
                    .iter()
                    .map(|r| TrialRow {
                        trial: r.trial,
                        passed: r.passed,
                        worst_ratio: r.worst_ratio,
                        max_error: r.measured_error.iter().copied().fold(0.0, f64::max),
                        max_bound: r.bound.iter().copied().fold(0.0, f64::max),
                        delta_norm_sq: r.delta_norm_sq,
                        sup_hessian_norm: r.sup_hessian_norm,
                        sup_argmax_t: r.sup_argmax_t,
                        cubic_slack: r.cubic_slack_estimate,
                        hessian_asymmetry: r.hessian_asymmetry,
                    })
                    .collect();
                write_csv(csv, &rows)?;
            }
            eprintln!("bound held in {passed}/{} trials", results.len());
            let failures = (passed < results.len())
                .then(|| format!("bound violated in {} trials", results.len() - passed))
                .into_iter()
                .collect::<Vec<_>>();
            (
                json!({ "options": opts, "results": results }),
                failures,
                json!({ "passed": passed, "trials": args.trials }),
            )
        }
        VerifyMode::Fisher => {
            let toy = SoftmaxToy::with_counts(4, 3, |k, c| 1 + (3 * k + 5 * c) % 7)?;
            let w = toy.mle();
            let coords: Vec<usize> = (0..toy.dim()).collect();
            let f = diag_empirical_fisher(&toy, &w, &coords)?;
            let h = diag_hessian_fd(&toy, &w, &coords, 1e-4)?;
            let toy_gap = mean_relative_gap(&f, &h);
            let fit = WellSpecifiedOptions { corpus_seed: cli.seed, ..WellSpecifiedOptions::default() };
            let check = FisherCheckOptions { seed: cli.seed, ..FisherCheckOptions::default() };
            let (report, train) = trained_fisher_check(&fit, &check)?;
            let mut failures = Vec::new();
            if !(toy_gap < 1e-3) {
                failures.push(format!("softmax toy gap {toy_gap:e} >= 1e-3"));
            }
            for (label, rho) in [
                ("per-layer", report.per_layer_rank_correlation),
                ("per-tensor", report.tensor_rank_correlation),
            ] {
                match rho {
                    Some(r) if r >= 0.8 => {}
                    other => eprintln!("warning: {label} rank correlation {other:?} below 0.8"),
                }
            }
            eprintln!(
                "toy gap {toy_gap:.2e}; trained: per-layer rho {:?}, per-tensor rho {:?}",
                report.per_layer_rank_correlation, report.tensor_rank_correlation
            );
            let summary = json!({
                "toy_gap": toy_gap,
                "per_layer_rank_correlation": report.per_layer_rank_correlation,
                "tensor_rank_correlation": report.tensor_rank_correlation,
            });
            (
                json!({ "toy": { "fisher": f, "hessian": h, "gap": toy_gap }, "fit": fit, "check": check, "train": train, "trained": report }),
                failures,
                summary,
            )
        }
        VerifyMode::Quadratic => {
            let q = Quadratic { h: fixture_matrix(6, cli.seed) };
            let delta = vec![0.3, -0.1, 0.2, 0.05, 0.4, -0.5];
            let fixture = quadratic_coefficient_check(&q, &[0.1; 6], &delta, &alpha_grid())?;
            let opts = VerifyOptions {
                delta_scale: args.delta_scale.unwrap_or(0.01),
                seed: cli.seed,
                subset_size: args.subset_size,
                ..VerifyOptions::default()
            };
            let trial = sample_trial(&opts, 0)?;
            let full = MicroScalar { model: &trial.model, probes: &trial.probes };
            let restricted = Restricted::new(&full, trial.model.params().to_vec(), trial.subset.clone())?;
            let micro = quadratic_coefficient_check(&restricted, &restricted.anchor_point(), &trial.delta, &alpha_grid())?;
            let mut failures = Vec::new();
            if !(fixture.max_relative_deviation < 1e-9) {
                failures.push(format!("quadratic fixture deviation {:e}", fixture.max_relative_deviation));
            }
            eprintln!(
                "profile deviation: fixture {:.2e}, micro model {:.2e}",
                fixture.max_relative_deviation, micro.max_relative_deviation
            );
            let summary = json!({
                "fixture_deviation": fixture.max_relative_deviation,
                "micro_deviation": micro.max_relative_deviation,
            });
            (json!({ "fixture": fixture, "micro": micro, "options": opts }), failures, summary)
        }
    };
    write_json(&args.report, &body)?;
    let mut m = Manifest::new(
        "verify",
        cli.seed,
        json!({ "mode": format!("{:?}", args.mode).to_lowercase(), "trials": args.trials,
                "delta_scale": args.delta_scale, "subset_size": args.subset_size,
                "report": args.report, "csv": args.csv }),
    )?;
    m.output(&args.report)?;
    if let Some(csv) = &args.csv {
        m.output(csv)?;
    }
    m.summary = summary;
    m.write(&cli.report_dir)?;
    if !failures.is_empty() {
        return Err(CheckFailed(failures.join("; ")).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct NlRow {
    layer: usize,
    nl_score: Option<f64>,
    relative_error: Option<f64>,
}

pub fn analyze_nl_cmd(cli: &Cli, args: &NlArgs) -> anyhow::Result<()> {
    let config = config_path_for(&args.base, args.arch_config.as_ref());
    let base = load_micro(&args.base, &config)?;
    let tuned = load_micro(&args.tuned, &config)?;
    let topology = parse_topology(&base.to_archive(), &NamingScheme::default())?;
    let analysis = analyze_nl(&base, &tuned, &topology, args.alpha, args.probes, cli.seed)?;
    let rows: Vec<NlRow> = analysis
        .records
        .iter()
        .map(|r| NlRow {
            layer: r.layer_index,
            nl_score: r.nl_score,
            relative_error: r.relative_merge_error,
        })
        .collect();
    write_csv(&args.out, &rows)?;
    if let Some(dat) = &args.dat {
        let fmt = |v: Option<f64>| v.map_or("NaN".to_string(), |x| format!("{x:.10e}"));
        let mut text = String::from("# layer nl_score relative_error\n");
        for r in &rows {
            text.push_str(&format!("{} {} {}\n", r.layer, fmt(r.nl_score), fmt(r.relative_error)));
        }
        atomic_write(dat, text.as_bytes())?;
    }

    let mut m = Manifest::new(
        "analyze-nl",
        cli.seed,
        json!({ "base": args.base, "tuned": args.tuned, "arch_config": config, "alpha": args.alpha,
                "probes": args.probes, "out": args.out, "dat": args.dat,
                "relative_error": "pooled residual norm / output change norm at the same alpha, second probe set (seed + 1)" }),
    )?;
    m.input(&args.base)?;
    m.input(&args.tuned)?;
    m.input(&config)?;
    m.output(&args.out)?;
    if let Some(dat) = &args.dat {
        m.output(dat)?;
    }
    m.summary = json!({ "pearson": analysis.pearson, "error_seed": analysis.error_seed });
    m.write(&cli.report_dir)?;
    eprintln!("pearson r = {:?}", analysis.pearson);
    Ok(())
}

pub fn micro_pair(cli: &Cli, args: &PairArgs) -> anyhow::Result<()> {
    let config = match &args.arch_config {
        Some(p) => MicroModelConfig::load(p)?,
        None => MicroModelConfig { seed: cli.seed, ..MicroModelConfig::default() },
    };
    let mut opts = PairOptions::default();
    opts.base_train.steps = args.base_steps;
    opts.tuned_train.steps = args.tuned_steps;
    let init = MicroModel::new(config.clone())?;
    let pair = train_pair(&init, &opts)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|source| fimmerge_core::Error::Io {
        path: args.out_dir.clone(),
        source,
    })?;
    let mut m = Manifest::new(
        "micro-pair",
        cli.seed,
        json!({ "out_dir": args.out_dir, "config": config, "pair": opts }),
    )?;
    for (stem, model) in [("base", &pair.base), ("tuned", &pair.tuned)] {
        let archive_path = args.out_dir.join(format!("{stem}.safetensors"));
        let config_path = args.out_dir.join(format!("{stem}.config.json"));
        write_archive(&model.to_archive(), &archive_path)?;
        write_json(&config_path, model.config())?;
        m.output(&archive_path)?;
        m.output(&config_path)?;
    }
    m.summary = json!({ "base": pair.base_report, "tuned": pair.tuned_report });
    m.write(&cli.report_dir)?;
    eprintln!(
        "base loss {:.4} -> {:.4}; tuned loss {:.4} -> {:.4}",
        pair.base_report.initial_loss,
        pair.base_report.final_loss,
        pair.tuned_report.initial_loss,
        pair.tuned_report.final_loss
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    label: String,
    theta: f64,
    log_range: f64,
    alpha_min: f64,
    alpha_max: f64,
    nll_base_task: f64,
    nll_tuned_task: f64,
}

#[derive(Serialize)]
struct FimRow {
    n_samples: usize,
    layer: usize,
    fim: f64,
    rank_correlation_with_largest: Option<f64>,
}

pub fn sweep(cli: &Cli, args: &SweepArgs) -> anyhow::Result<()> {
    let config = MicroModelConfig { seed: cli.seed, ..MicroModelConfig::default() };
    let fim_opts = FimOptions { seed: cli.seed, ..FimOptions::default() };
    let summary = match args.kind {
        SweepKind::Theta | SweepKind::Signals => {
            let ctx = SweepContext::build(config, &PairOptions::default(), &fim_opts)?;
            let template = default_template();
            let points = if args.kind == SweepKind::Theta {
                theta_sweep(&ctx, &template, &args.thetas)?
            } else {
                signal_sweep(&ctx, &template)?
            };
            let rows: Vec<SweepRow> = points
                .iter()
                .map(|p| SweepRow {
                    label: p.label.clone(),
                    theta: p.theta,
                    log_range: p.log_range,
                    alpha_min: p.alphas.values().copied().fold(f64::INFINITY, f64::min),
                    alpha_max: p.alphas.values().copied().fold(f64::NEG_INFINITY, f64::max),
                    nll_base_task: p.nll_base_task,
                    nll_tuned_task: p.nll_tuned_task,
                })
                .collect();
            write_csv(&args.out, &rows)?;
            serde_json::to_value(&points)?
        }
        SweepKind::FimN => {
            let model = MicroModel::new(config)?;
            let topology = parse_topology(&model.to_archive(), &NamingScheme::default())?;
            let points = fim_sample_sweep(&model, &topology, &args.counts, &fim_opts)?;
            let rows: Vec<FimRow> = points
                .iter()
                .flat_map(|p| {
                    p.per_layer.iter().map(|(&l, &v)| FimRow {
                        n_samples: p.n_samples,
                        layer: l,
                        fim: v,
                        rank_correlation_with_largest: p.rank_correlation_with_largest,
                    })
                })
                .collect();
            write_csv(&args.out, &rows)?;
            serde_json::to_value(&points)?
        }
    };
    let mut m = Manifest::new(
        "sweep",
        cli.seed,
        json!({ "kind": format!("{:?}", args.kind).to_lowercase(), "thetas": args.thetas,
                "counts": args.counts, "out": args.out }),
    )?;
    m.output(&args.out)?;
    m.summary = summary;
    m.write(&cli.report_dir)?;
    Ok(())
}
