//! Interpolation error of weight-space merges and its curvature bound.
//!
//! For `g(t) = f(theta0 + t delta)` the merge error at coefficient `a` is
//! `|g(a) - (1 - a) g(0) - a g(1)|`, bounded by
//! `a (1 - a) / 2 * ||delta||^2 * sup_t ||H(theta0 + t delta)||_2`.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::objective::{MicroScalar, Restricted, ScalarObjective, VectorObjective};
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, SymMatrix};
use crate::model::corpus::uniform_sequences;
use crate::model::{MicroModel, MicroModelConfig};

/// Largest coordinate subset for which a dense Hessian is formed.
pub const MAX_HESSIAN_DIM: usize = 2000;

/// `{0.1, 0.2, ..., 0.9}`
pub fn alpha_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// `n` evenly spaced points covering `[0, 1]`.
pub fn uniform_t_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn along(theta0: &[f64], delta: &[f64], t: f64) -> Vec<f64> {
    theta0.iter().zip(delta).map(|(x, d)| x + t * d).collect()
}

fn check_dims(dim: usize, theta0: &[f64], delta: &[f64]) -> Result<()> {
    if theta0.len() != dim || delta.len() != dim {
        return Err(Error::InvalidArgument(format!(
            "objective has {dim} coordinates, got theta0 {} and delta {}",
            theta0.len(),
            delta.len()
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Merge error of a scalar objective at one coefficient.
pub fn merging_error<O: ScalarObjective>(obj: &O, theta0: &[f64], delta: &[f64], alpha: f64) -> Result<f64> {
    Ok(merging_error_profile(obj, theta0, delta, &[alpha])?[0])
}

/// Merge error at every coefficient in `alphas`, sharing the endpoint
/// evaluations.
pub fn merging_error_profile<O: ScalarObjective>(
    obj: &O,
    theta0: &[f64],
    delta: &[f64],
    alphas: &[f64],
) -> Result<Vec<f64>> {
    check_dims(obj.dim(), theta0, delta)?;
    alphas.iter().try_for_each(|&a| check_alpha(a))?;
    let f0 = obj.value(theta0)?;
    let f1 = obj.value(&along(theta0, delta, 1.0))?;
    alphas
        .iter()
        .map(|&a| {
            let fa = obj.value(&along(theta0, delta, a))?;
            Ok((fa - ((1.0 - a) * f0 + a * f1)).abs())
        })
        .collect()
}

/// Merge error of a vector objective: the L2 norm of the interpolation
/// residual.
pub fn merging_error_vec<O: VectorObjective>(obj: &O, theta0: &[f64], delta: &[f64], alpha: f64) -> Result<f64> {
    Ok(interpolation_residual(obj, theta0, delta, alpha)?.0)
}

/// `(||residual||, ||f(theta0 + delta) - f(theta0)||)` for a vector
/// objective.
pub fn interpolation_residual<O: VectorObjective>(
    obj: &O,
    theta0: &[f64],
    delta: &[f64],
    alpha: f64,
) -> Result<(f64, f64)> {
    check_dims(obj.dim(), theta0, delta)?;
    check_alpha(alpha)?;
    let f0 = obj.outputs(theta0)?;
    let f1 = obj.outputs(&along(theta0, delta, 1.0))?;
    let fa = obj.outputs(&along(theta0, delta, alpha))?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((a, b), c) in fa.iter().zip(&f0).zip(&f1) {
        let r = a - ((1.0 - alpha) * b + alpha * c);
        num += r * r;
        den += (c - b) * (c - b);
    }
    Ok((num.sqrt(), den.sqrt()))
}

#[derive(Debug, Clone)]
pub struct FdHessian {
    /// Symmetrized estimate.
    pub matrix: SymMatrix,
    /// Relative asymmetry of the raw estimate.
    pub asymmetry: f64,
}

/// Central differences of the analytic gradient, one column per coordinate.
pub fn finite_difference_hessian<O: ScalarObjective>(obj: &O, x: &[f64], h: f64) -> Result<FdHessian> {
    let n = obj.dim();
    if x.len() != n {
        return Err(Error::InvalidArgument(format!("point has {} coordinates, expected {n}", x.len())));
    }
    if n > MAX_HESSIAN_DIM {
        return Err(Error::InvalidArgument(format!(
            "dense Hessian limited to {MAX_HESSIAN_DIM} coordinates, got {n}"
        )));
    }
    let columns = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut p = x.to_vec();
            p[j] = x[j] + h;
            let up = obj.gradient(&p)?;
            p[j] = x[j] - h;
            let down = obj.gradient(&p)?;
            Ok(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut raw = SymMatrix::zeros(n);
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            raw.set(i, j, v);
        }
    }
    let asymmetry = raw.relative_asymmetry();
    raw.symmetrize();
    Ok(FdHessian { matrix: raw, asymmetry })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianSup {
    /// Evaluated points, grid first, then refinement points.
    pub t_points: Vec<f64>,
    pub norms: Vec<f64>,
    pub sup: f64,
    pub argmax_t: f64,
    pub max_asymmetry: f64,
}

/// Largest Hessian spectral norm along the segment `theta0 + t delta` over
/// `t_grid`, optionally refined by one bisection step on each side of the
/// grid argmax.
pub fn hessian_sup<O: ScalarObjective>(
    obj: &O,
    theta0: &[f64],
    delta: &[f64],
    t_grid: &[f64],
    h: f64,
    refine: bool,
) -> Result<HessianSup> {
    check_dims(obj.dim(), theta0, delta)?;
    if t_grid.is_empty() {
        return Err(Error::InvalidArgument("empty t grid".into()));
    }
    let eval = |t: f64| -> Result<(f64, f64)> {
        let hess = finite_difference_hessian(obj, &along(theta0, delta, t), h)?;
        Ok((spectral_norm(&hess.matrix)?, hess.asymmetry))
    };
    let mut t_points = t_grid.to_vec();
    let mut results = t_grid.iter().map(|&t| eval(t)).collect::<Result<Vec<_>>>()?;
    let best = |r: &[(f64, f64)]| {
        r.iter()
            .enumerate()
            .fold(0, |b, (i, x)| if x.0 > r[b].0 { i } else { b })
    };
    if refine && t_grid.len() > 1 {
        let i = best(&results);
        let mut extra = Vec::new();
        if i > 0 {
            extra.push(0.5 * (t_grid[i - 1] + t_grid[i]));
        }
        if i + 1 < t_grid.len() {
            extra.push(0.5 * (t_grid[i] + t_grid[i + 1]));
        }
        for t in extra {
            results.push(eval(t)?);
            t_points.push(t);
        }
    }
    let i = best(&results);
    Ok(HessianSup {
        norms: results.iter().map(|r| r.0).collect(),
        max_asymmetry: results.iter().map(|r| r.1).fold(0.0, f64::max),
        sup: results[i].0,
        argmax_t: t_points[i],
        t_points,
    })
}

/// `a (1 - a) / 2 * ||delta||^2 * sup_norm`
pub fn hessian_bound(alpha: f64, delta_norm_sq: f64, sup_norm: f64) -> f64 {
    alpha * (1.0 - alpha) / 2.0 * delta_norm_sq * sup_norm
}

/// `max |g'''| / 6` along the unit direction of `delta`, with `g'''` from
/// second differences of the analytic directional derivative at
/// `t in {0, 0.5, 1}`.
pub fn cubic_coefficient<O: ScalarObjective>(obj: &O, theta0: &[f64], delta: &[f64], h: f64) -> Result<f64> {
    check_dims(obj.dim(), theta0, delta)?;
    let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let unit: Vec<f64> = delta.iter().map(|d| d / norm).collect();
    let slope = |s: f64| -> Result<f64> {
        let g = obj.gradient(&along(theta0, &unit, s))?;
        Ok(g.iter().zip(&unit).map(|(a, b)| a * b).sum())
    };
    let mut worst = 0.0f64;
    for t in [0.0, 0.5, 1.0] {
        let s = t * norm;
        let third = (slope(s + h)? - 2.0 * slope(s)? + slope(s - h)?) / (h * h);
        worst = worst.max(third.abs());
    }
    Ok(worst / 6.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckOptions {
    pub alpha_grid: Vec<f64>,
    pub t_points: usize,
    pub refine: bool,
    /// Finite-difference step for the Hessian.
    pub hessian_step: f64,
    /// Step (in arclength) for the third-derivative probe.
    pub cubic_step: f64,
    pub tol_rel: f64,
}

impl Default for BoundCheckOptions {
    fn default() -> Self {
        Self {
            alpha_grid: alpha_grid(),
            t_points: 11,
            refine: true,
            hessian_step: 1e-4,
            cubic_step: 1e-3,
            tol_rel: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckResult {
    pub trial: usize,
    pub alpha_grid: Vec<f64>,
    pub measured_error: Vec<f64>,
    pub bound: Vec<f64>,
    /// Sum of squares of the perturbation.
    pub delta_norm_sq: f64,
    pub sup_hessian_norm: f64,
    pub sup_argmax_t: f64,
    pub hessian_asymmetry: f64,
    /// `c ||delta||^3` with `c` from [`cubic_coefficient`].
    pub cubic_slack_estimate: f64,
    pub tol_rel: f64,
    /// Largest `E / bound` over the grid (0 when every bound is 0).
    pub worst_ratio: f64,
    pub passed: bool,
}

/// Compare measured merge error against the curvature bound on one
/// segment.
pub fn check_bound<O: ScalarObjective>(
    obj: &O,
    theta0: &[f64],
    delta: &[f64],
    opts: &BoundCheckOptions,
    trial: usize,
) -> Result<BoundCheckResult> {
    let measured = merging_error_profile(obj, theta0, delta, &opts.alpha_grid)?;
    let sup = hessian_sup(obj, theta0, delta, &uniform_t_grid(opts.t_points), opts.hessian_step, opts.refine)?;
    let delta_norm_sq: f64 = delta.iter().map(|d| d * d).sum();
    let c = cubic_coefficient(obj, theta0, delta, opts.cubic_step)?;
    let slack = c * delta_norm_sq.powf(1.5);
    let bound: Vec<f64> = opts
        .alpha_grid
        .iter()
        .map(|&a| hessian_bound(a, delta_norm_sq, sup.sup))
        .collect();
    let passed = measured
        .iter()
        .zip(&bound)
        .all(|(e, b)| *e <= b * (1.0 + opts.tol_rel) + slack);
    let worst_ratio = measured
        .iter()
        .zip(&bound)
        .filter(|(_, b)| **b > 0.0)
        .map(|(e, b)| e / b)
        .fold(0.0, f64::max);
    Ok(BoundCheckResult {
        trial,
        alpha_grid: opts.alpha_grid.clone(),
        measured_error: measured,
        bound,
        delta_norm_sq,
        sup_hessian_norm: sup.sup,
        sup_argmax_t: sup.argmax_t,
        hessian_asymmetry: sup.max_asymmetry,
        cubic_slack_estimate: slack,
        tol_rel: opts.tol_rel,
        worst_ratio,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub trials: usize,
    /// Euclidean norm of every random perturbation.
    pub delta_scale: f64,
    pub seed: u64,
    /// Coordinates carrying the perturbation; the Hessian is formed on these.
    pub subset_size: usize,
    pub probe_count: usize,
    pub probe_len: usize,
    pub model: MicroModelConfig,
    pub check: BoundCheckOptions,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            delta_scale: 0.1,
            seed: 42,
            subset_size: 48,
            probe_count: 4,
            probe_len: 16,
            model: MicroModelConfig::default(),
            check: BoundCheckOptions::default(),
        }
    }
}

/// Per-trial seed: distinct streams derived from the run seed.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_add((trial as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Random segment for one trial: model, probes, coordinate subset and a
/// perturbation on that subset with norm `delta_scale`.
pub struct Trial {
    pub model: MicroModel,
    pub probes: Vec<Vec<usize>>,
    pub subset: Vec<usize>,
    pub delta: Vec<f64>,
}

pub fn sample_trial(opts: &VerifyOptions, trial: usize) -> Result<Trial> {
    let seed = trial_seed(opts.seed, trial);
    let model = MicroModel::new(MicroModelConfig { seed, ..opts.model.clone() })?;
    let probes = uniform_sequences(model.config().vocab_size, opts.probe_count, opts.probe_len, seed ^ 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let k = opts.subset_size.min(model.n_params()).min(MAX_HESSIAN_DIM);
    let mut subset = index::sample(&mut rng, model.n_params(), k).into_vec();
    subset.sort_unstable();
    let raw: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let delta = raw.iter().map(|x| x * opts.delta_scale / norm).collect();
    Ok(Trial { model, probes, subset, delta })
}

/// Run the bound check on `opts.trials` random segments of randomly
/// initialised micro models. Failures are results, not errors.
pub fn verify_bound(opts: &VerifyOptions) -> Result<Vec<BoundCheckResult>> {
    (0..opts.trials)
        .into_par_iter()
        .map(|i| {
            let trial = sample_trial(opts, i)?;
            let full = MicroScalar { model: &trial.model, probes: &trial.probes };
            let restricted = Restricted::new(&full, trial.model.params().to_vec(), trial.subset.clone())?;
            let theta0 = restricted.anchor_point();
            check_bound(&restricted, &theta0, &trial.delta, &opts.check, i)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProfile {
    pub alpha_grid: Vec<f64>,
    /// `E(a) / (a (1 - a))`
    pub ratios: Vec<f64>,
    pub mean: f64,
    pub max_relative_deviation: f64,
}

/// How far `E(a) / (a (1 - a))` strays from constant over `alphas`.
pub fn quadratic_coefficient_check<O: ScalarObjective>(
    obj: &O,
    theta0: &[f64],
    delta: &[f64],
    alphas: &[f64],
) -> Result<QuadraticProfile> {
    if alphas.is_empty() || alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::InvalidArgument("alpha grid must be non-empty and inside (0, 1)".into()));
    }
    let errors = merging_error_profile(obj, theta0, delta, alphas)?;
    let ratios: Vec<f64> = errors.iter().zip(alphas).map(|(e, a)| e / (a * (1.0 - a))).collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let spread = ratios.iter().map(|r| (r - mean).abs()).fold(0.0, f64::max);
    let max_relative_deviation = if spread == 0.0 { 0.0 } else { spread / mean.abs() };
    Ok(QuadraticProfile {
        alpha_grid: alphas.to_vec(),
        ratios,
        mean,
        max_relative_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::objective::{Linear, Quadratic};
    use rand::Rng;

    fn random_sym(n: usize, seed: u64) -> SymMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut m = SymMatrix::from_rows(n, vals).unwrap();
        m.symmetrize();
        m
    }

    #[test]
    fn endpoints_are_exactly_zero() {
        let q = Quadratic { h: random_sym(5, 1) };
        let theta0 = vec![0.3, -0.2, 0.1, 0.7, -0.9];
        let delta = vec![0.5, 0.1, -0.3, 0.2, 0.05];
        let e = merging_error_profile(&q, &theta0, &delta, &[0.0, 1.0]).unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_objective_has_no_error() {
        let lin = Linear { c: vec![1.5, -2.0, 0.25] };
        for a in alpha_grid() {
            let e = merging_error(&lin, &[1.0, 2.0, 3.0], &[0.5, -0.25, 0.125], a).unwrap();
            assert!(e <= 1e-15, "{a}: {e}");
        }
    }

    #[test]
    fn quadratic_error_matches_closed_form() {
        // H = 2I, delta = e1: E(0.5) = 0.5 * 0.5 / 2 * 2 = 0.25
        let q = Quadratic { h: SymMatrix::from_diagonal(&[2.0; 4]) };
        let e = merging_error(&q, &[0.0; 4], &[1.0, 0.0, 0.0, 0.0], 0.5).unwrap();
        assert!((e - 0.25).abs() < 1e-15);

        let h = random_sym(6, 2);
        let q = Quadratic { h: h.clone() };
        let theta0 = vec![0.1; 6];
        let delta = vec![0.3, -0.1, 0.2, 0.0, 0.4, -0.5];
        let curv = h.quadratic_form(&delta).abs();
        for a in alpha_grid() {
            let e = merging_error(&q, &theta0, &delta, a).unwrap();
            let exact = a * (1.0 - a) / 2.0 * curv;
            assert!((e - exact).abs() <= 1e-12 * exact.max(1e-300), "{a}: {e} vs {exact}");
        }
    }

    #[test]
    fn fd_hessian_of_quadratic_is_exact() {
        let h = random_sym(8, 3);
        let q = Quadratic { h: h.clone() };
        let fd = finite_difference_hessian(&q, &[0.2; 8], 1e-4).unwrap();
        for (a, b) in fd.matrix.as_slice().iter().zip(h.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(fd.asymmetry < 1e-9);
    }

    #[test]
    fn bound_is_tight_along_the_top_eigenvector() {
        let diag = [3.0, -1.0, 0.5, 2.0];
        let q = Quadratic { h: SymMatrix::from_diagonal(&diag) };
        let delta = vec![0.7, 0.0, 0.0, 0.0];
        let res = check_bound(&q, &[0.1; 4], &delta, &BoundCheckOptions::default(), 0).unwrap();
        assert!(res.passed);
        for (e, b) in res.measured_error.iter().zip(&res.bound) {
            assert!((e - b).abs() <= 1e-8 * b, "{e} vs {b}");
        }
        assert!(res.cubic_slack_estimate.abs() < 1e-6);

        // Off the top eigenvector the inequality is strict.
        let res = check_bound(&q, &[0.1; 4], &[0.0, 0.0, 0.7, 0.0], &BoundCheckOptions::default(), 0).unwrap();
        assert!(res.worst_ratio < 0.2);
    }

    #[test]
    fn bound_vanishes_at_endpoints_and_is_symmetric() {
        assert_eq!(hessian_bound(0.0, 2.0, 3.0), 0.0);
        assert_eq!(hessian_bound(1.0, 2.0, 3.0), 0.0);
        for a in alpha_grid() {
            assert!((hessian_bound(a, 0.3, 1.7) - hessian_bound(1.0 - a, 0.3, 1.7)).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_profile_is_flat() {
        let q = Quadratic { h: random_sym(5, 4) };
        let delta = vec![0.2, -0.4, 0.1, 0.3, 0.05];
        let p = quadratic_coefficient_check(&q, &[0.0; 5], &delta, &alpha_grid()).unwrap();
        assert!(p.max_relative_deviation < 1e-9);
        let single = quadratic_coefficient_check(&q, &[0.0; 5], &delta, &[0.5]).unwrap();
        assert_eq!(single.max_relative_deviation, 0.0);
        assert!(quadratic_coefficient_check(&q, &[0.0; 5], &delta, &[0.0]).is_err());
    }

    #[test]
    fn sup_refinement_adds_neighbours_of_the_argmax() {
        let q = Quadratic { h: SymMatrix::from_diagonal(&[1.0, 2.0]) };
        let s = hessian_sup(&q, &[0.0, 0.0], &[1.0, 1.0], &uniform_t_grid(11), 1e-4, true).unwrap();
        assert_eq!(s.t_points.len(), 13);
        assert!((s.sup - 2.0).abs() < 1e-8);
    }

    #[test]
    fn cubic_term_is_measured() {
        // f(x) = x^3 on a line: g''' = 6, so c = 1.
        struct Cube;
        impl ScalarObjective for Cube {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, x: &[f64]) -> Result<f64> {
                Ok(x[0].powi(3))
            }
            fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![3.0 * x[0] * x[0]])
            }
        }
        let c = cubic_coefficient(&Cube, &[0.2], &[0.1], 1e-3).unwrap();
        assert!((c - 1.0).abs() < 1e-6, "{c}");
    }

    #[test]
    fn micro_model_trials_are_reproducible() {
        let opts = VerifyOptions {
            trials: 2,
            subset_size: 12,
            check: BoundCheckOptions { t_points: 3, ..BoundCheckOptions::default() },
            ..VerifyOptions::default()
        };
        let a = verify_bound(&opts).unwrap();
        let b = verify_bound(&opts).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.passed));
        for r in &a {
            assert!((r.delta_norm_sq - 0.01).abs() < 1e-12);
        }
    }
}
