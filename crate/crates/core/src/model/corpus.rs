//! Synthetic token corpora for training and probing micro models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MicroModel;
use crate::error::Result;

/// `n` sequences of i.i.d. tokens drawn uniformly from `0..vocab`.
pub fn uniform_sequences(vocab: usize, n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

/// Sequences following `x[t+1] = (mult * x[t] + add) mod vocab`, with each
/// step replaced by a uniform token with probability `noise`.
pub fn affine_corpus(
    vocab: usize,
    n: usize,
    len: usize,
    mult: usize,
    add: usize,
    noise: f64,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut seq = Vec::with_capacity(len);
            let mut x = rng.random_range(0..vocab);
            seq.push(x);
            for _ in 1..len {
                x = if rng.random::<f64>() < noise {
                    rng.random_range(0..vocab)
                } else {
                    (mult * x + add) % vocab
                };
                seq.push(x);
            }
            seq
        })
        .collect()
}

/// Ancestral samples from `model`, each starting from a uniform first token.
pub fn sample_from_model(model: &MicroModel, n: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config().vocab_size;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut seq = vec![rng.random_range(0..vocab)];
        while seq.len() < len {
            // Pad with a dummy target so the last position is evaluated.
            let mut probe = seq.clone();
            probe.push(0);
            let probs = model.next_token_probs(&probe)?;
            let last = probs.last().expect("at least one position");
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = vocab - 1;
            for (tok, &p) in last.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = tok;
                    break;
                }
            }
            seq.push(pick);
        }
        out.push(seq);
    }
    Ok(out)
}
