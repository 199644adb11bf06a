use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MicroModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Stop early once the full-batch gradient norm drops below this.
    pub grad_tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.5,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
}

/// Mean loss and mean gradient over a corpus. Per-sequence work runs in
/// parallel; the reduction is sequential in corpus order so the result is
/// bit-reproducible.
pub(crate) fn corpus_gradient(
    model: &MicroModel,
    params: &[f64],
    corpus: &[Vec<usize>],
) -> Result<(f64, Vec<f64>)> {
    let grads = corpus
        .par_iter()
        .map(|seq| model.backward_nll_at(params, seq))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; params.len()];
    let mut loss = 0.0;
    for g in &grads {
        loss += g.loss;
        for (a, x) in acc.iter_mut().zip(&g.flat) {
            *a += x;
        }
    }
    let n = corpus.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok((loss / n, acc))
}

/// Full-batch gradient descent on the mean NLL of `corpus` with a fixed
/// learning rate and no momentum. The returned model is rounded to f32.
pub fn train_to_convergence(
    model: &MicroModel,
    corpus: &[Vec<usize>],
    opts: &TrainOptions,
) -> Result<(MicroModel, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    let mut params = model.params().to_vec();
    let (mut loss, mut grad) = corpus_gradient(model, &params, corpus)?;
    let initial_loss = loss;
    let mut steps_run = 0;
    for step in 0..opts.steps {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < opts.grad_tol {
            break;
        }
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= opts.lr * g;
        }
        let next = corpus_gradient(model, &params, corpus)?;
        if !next.0.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: next.0,
            });
        }
        (loss, grad) = next;
        steps_run = step + 1;
    }
    let mut trained = model.with_params(params);
    trained.round_to_f32();
    let (final_loss, final_grad) = corpus_gradient(&trained, trained.params(), corpus)?;
    let final_grad_norm = final_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    log::debug!(
        "trained {steps_run} steps: loss {initial_loss:.4} -> {final_loss:.4} (last step {loss:.4}), |g| = {final_grad_norm:.3e}"
    );
    Ok((
        trained,
        TrainReport {
            steps_run,
            initial_loss,
            final_loss,
            final_grad_norm,
        },
    ))
}
