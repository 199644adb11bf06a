//! Differentiable functions of a flat parameter vector used by the checks.

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::model::MicroModel;

/// Scalar function with an analytic gradient.
pub trait ScalarObjective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Vector-valued function (used for output summaries).
pub trait VectorObjective: Sync {
    fn dim(&self) -> usize;
    fn outputs(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// `f(x) = c . x`
#[derive(Debug, Clone)]
pub struct Linear {
    pub c: Vec<f64>,
}

impl ScalarObjective for Linear {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.c.iter().zip(x).map(|(a, b)| a * b).sum())
    }

    fn gradient(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.c.clone())
    }
}

/// `f(x) = A x`, row-major `A` with `rows` outputs.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub rows: usize,
    pub a: Vec<f64>,
}

impl VectorObjective for LinearMap {
    fn dim(&self) -> usize {
        self.a.len() / self.rows
    }

    fn outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cols = self.dim();
        Ok(self
            .a
            .chunks_exact(cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// `f(x) = x^T H x / 2`
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub h: SymMatrix,
}

impl ScalarObjective for Quadratic {
    fn dim(&self) -> usize {
        self.h.dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(0.5 * self.h.quadratic_form(x))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.h.mul_vec(x))
    }
}

/// Mean log-likelihood of a fixed probe set under the micro model.
pub struct MicroScalar<'a> {
    pub model: &'a MicroModel,
    pub probes: &'a [Vec<usize>],
}

impl ScalarObjective for MicroScalar<'_> {
    fn dim(&self) -> usize {
        self.model.n_params()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        self.model.scalar_output_at(x, self.probes)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.scalar_output_grad_at(x, self.probes)
    }
}

/// Per-position target log-probabilities of one probe sequence.
pub struct MicroTokenLogProbs<'a> {
    pub model: &'a MicroModel,
    pub probe: &'a [usize],
}

impl VectorObjective for MicroTokenLogProbs<'_> {
    fn dim(&self) -> usize {
        self.model.n_params()
    }

    fn outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.token_log_probs_at(x, self.probe)
    }
}

/// `inner` as a function of the coordinates in `subset` only, every other
/// coordinate frozen at `anchor`.
pub struct Restricted<'a, O> {
    inner: &'a O,
    anchor: Vec<f64>,
    subset: Vec<usize>,
}

impl<'a, O: ScalarObjective> Restricted<'a, O> {
    pub fn new(inner: &'a O, anchor: Vec<f64>, subset: Vec<usize>) -> Result<Self> {
        if anchor.len() != inner.dim() {
            return Err(Error::InvalidArgument(format!(
                "anchor has {} coordinates, objective has {}",
                anchor.len(),
                inner.dim()
            )));
        }
        if let Some(&bad) = subset.iter().find(|&&i| i >= anchor.len()) {
            return Err(Error::InvalidArgument(format!("subset index {bad} out of range")));
        }
        Ok(Self { inner, anchor, subset })
    }

    /// Anchor values at the subset coordinates.
    pub fn anchor_point(&self) -> Vec<f64> {
        self.subset.iter().map(|&i| self.anchor[i]).collect()
    }

    fn embed(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.anchor.clone();
        for (&i, &v) in self.subset.iter().zip(y) {
            x[i] = v;
        }
        x
    }
}

impl<O: ScalarObjective> ScalarObjective for Restricted<'_, O> {
    fn dim(&self) -> usize {
        self.subset.len()
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        self.inner.value(&self.embed(y))
    }

    fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        let g = self.inner.gradient(&self.embed(y))?;
        Ok(self.subset.iter().map(|&i| g[i]).collect())
    }
}
