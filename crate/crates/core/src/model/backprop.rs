//! Forward pass with activation caching and the matching reverse pass.
//!
//! Matrices are row-major; a weight of shape `[out, in]` maps `x` to `W x`.
//! For a sequence of `T` tokens the model runs over the first `T - 1`
//! positions, each predicting the following token.

use super::{MicroModelConfig, ParamLayout};

const RMS_EPS: f64 = 1e-5;

struct BlockCache {
    h_in: Vec<f64>,
    rms1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `s x s`, zero above the diagonal.
    att: Vec<f64>,
    c: Vec<f64>,
    h_mid: Vec<f64>,
    rms2: Vec<f64>,
    b: Vec<f64>,
    gate: Vec<f64>,
    up: Vec<f64>,
    m: Vec<f64>,
}

pub(super) struct Forward {
    s: usize,
    targets: Vec<usize>,
    inputs: Vec<usize>,
    blocks: Vec<BlockCache>,
    h_final: Vec<f64>,
    rms_final: Vec<f64>,
    z: Vec<f64>,
    /// `s x vocab` log-softmax of the logits.
    logp: Vec<f64>,
    vocab: usize,
}

impl Forward {
    pub fn target_log_probs(&self) -> Vec<f64> {
        (0..self.s)
            .map(|i| self.logp[i * self.vocab + self.targets[i]])
            .collect()
    }

    pub fn nll(&self) -> f64 {
        -self.target_log_probs().iter().sum::<f64>() / self.s as f64
    }

    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.logp
            .chunks_exact(self.vocab)
            .map(|row| row.iter().map(|x| x.exp()).collect())
            .collect()
    }
}

/// `y[r, o] = sum_i w[o, i] x[r, i]`
fn linear(x: &[f64], rows: usize, w: &[f64], out: usize, inp: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            let wo = &w[o * inp..(o + 1) * inp];
            y[r * out + o] = wo.iter().zip(xr).map(|(a, b)| a * b).sum();
        }
    }
    y
}

/// `dx[r, i] = sum_o dy[r, o] w[o, i]`
fn linear_back_input(dy: &[f64], rows: usize, w: &[f64], out: usize, inp: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * inp];
    for r in 0..rows {
        let dxr = &mut dx[r * inp..(r + 1) * inp];
        for o in 0..out {
            let g = dy[r * out + o];
            if g == 0.0 {
                continue;
            }
            for (d, wv) in dxr.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                *d += g * wv;
            }
        }
    }
    dx
}

/// `dw[o, i] += sum_r dy[r, o] x[r, i]`
fn accum_weight_grad(dw: &mut [f64], dy: &[f64], x: &[f64], rows: usize, out: usize, inp: usize) {
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            let g = dy[r * out + o];
            if g == 0.0 {
                continue;
            }
            for (d, xv) in dw[o * inp..(o + 1) * inp].iter_mut().zip(xr) {
                *d += g * xv;
            }
        }
    }
}

fn rmsnorm(x: &[f64], rows: usize, dim: usize, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; rows * dim];
    let mut rms = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / dim as f64;
        let rr = (ms + RMS_EPS).sqrt();
        rms[r] = rr;
        for j in 0..dim {
            y[r * dim + j] = xr[j] / rr * g[j];
        }
    }
    (y, rms)
}

fn rmsnorm_backward(
    dy: &[f64],
    x: &[f64],
    rms: &[f64],
    g: &[f64],
    dg: &mut [f64],
    rows: usize,
    dim: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * dim];
    for r in 0..rows {
        let rr = rms[r];
        let mut dot = 0.0;
        for j in 0..dim {
            let xhat = x[r * dim + j] / rr;
            let dxhat = dy[r * dim + j] * g[j];
            dg[j] += dy[r * dim + j] * xhat;
            dot += dxhat * xhat;
        }
        dot /= dim as f64;
        for j in 0..dim {
            let xhat = x[r * dim + j] / rr;
            let dxhat = dy[r * dim + j] * g[j];
            dx[r * dim + j] = (dxhat - xhat * dot) / rr;
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_in_place(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(super) fn forward(
    cfg: &MicroModelConfig,
    layout: &ParamLayout,
    p: &[f64],
    tokens: &[usize],
) -> Forward {
    let (vocab, d, f) = (cfg.vocab_size, cfg.hidden_dim, cfg.ffn_dim);
    let s = tokens.len() - 1;
    let inputs = tokens[..s].to_vec();
    let targets = tokens[1..].to_vec();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let mut h = vec![0.0; s * d];
    for (i, &tok) in inputs.iter().enumerate() {
        for j in 0..d {
            h[i * d + j] = p[layout.embed + tok * d + j] + p[layout.pos + i * d + j];
        }
    }

    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for off in &layout.blocks {
        let h_in = h;
        let (a, rms1) = rmsnorm(&h_in, s, d, &p[off.ln1..off.ln1 + d]);
        let q = linear(&a, s, &p[off.q..off.q + d * d], d, d);
        let k = linear(&a, s, &p[off.k..off.k + d * d], d, d);
        let v = linear(&a, s, &p[off.v..off.v + d * d], d, d);

        let mut att = vec![0.0; s * s];
        let mut c = vec![0.0; s * d];
        for t in 0..s {
            let qt = &q[t * d..(t + 1) * d];
            let row = &mut att[t * s..t * s + t + 1];
            let mut max = f64::NEG_INFINITY;
            for (u, slot) in row.iter_mut().enumerate() {
                let score: f64 = qt.iter().zip(&k[u * d..(u + 1) * d]).map(|(a, b)| a * b).sum();
                *slot = score * inv_sqrt_d;
                max = max.max(*slot);
            }
            let mut z = 0.0;
            for slot in row.iter_mut() {
                *slot = (*slot - max).exp();
                z += *slot;
            }
            for slot in row.iter_mut() {
                *slot /= z;
            }
            for (u, &w) in row.iter().enumerate() {
                for j in 0..d {
                    c[t * d + j] += w * v[u * d + j];
                }
            }
        }
        let attn_out = linear(&c, s, &p[off.o..off.o + d * d], d, d);
        let mut h_mid = h_in.clone();
        add_in_place(&mut h_mid, &attn_out);

        let (b, rms2) = rmsnorm(&h_mid, s, d, &p[off.ln2..off.ln2 + d]);
        let gate = linear(&b, s, &p[off.gate..off.gate + f * d], f, d);
        let up = linear(&b, s, &p[off.up..off.up + f * d], f, d);
        let m: Vec<f64> = gate
            .iter()
            .zip(&up)
            .map(|(&g, &u)| g * sigmoid(g) * u)
            .collect();
        let mlp_out = linear(&m, s, &p[off.down..off.down + d * f], d, f);
        let mut h_out = h_mid.clone();
        add_in_place(&mut h_out, &mlp_out);

        blocks.push(BlockCache {
            h_in,
            rms1,
            a,
            q,
            k,
            v,
            att,
            c,
            h_mid,
            rms2,
            b,
            gate,
            up,
            m,
        });
        h = h_out;
    }

    let (z, rms_final) = rmsnorm(&h, s, d, &p[layout.final_norm..layout.final_norm + d]);
    let mut logp = linear(&z, s, &p[layout.head..layout.head + vocab * d], vocab, d);
    for row in logp.chunks_exact_mut(vocab) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }

    Forward {
        s,
        targets,
        inputs,
        blocks,
        h_final: h,
        rms_final,
        z,
        logp,
        vocab,
    }
}

/// Gradient of the mean NLL with respect to the flat parameter vector.
pub(super) fn backward(
    cfg: &MicroModelConfig,
    layout: &ParamLayout,
    p: &[f64],
    fwd: &Forward,
) -> Vec<f64> {
    let (vocab, d, f) = (cfg.vocab_size, cfg.hidden_dim, cfg.ffn_dim);
    let s = fwd.s;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut grad = vec![0.0; p.len()];

    // d(mean NLL)/d logits = (softmax - onehot) / s
    let mut dlogits = vec![0.0; s * vocab];
    for i in 0..s {
        for v in 0..vocab {
            dlogits[i * vocab + v] = fwd.logp[i * vocab + v].exp() / s as f64;
        }
        dlogits[i * vocab + fwd.targets[i]] -= 1.0 / s as f64;
    }
    let head = &p[layout.head..layout.head + vocab * d];
    accum_weight_grad(
        &mut grad[layout.head..layout.head + vocab * d],
        &dlogits,
        &fwd.z,
        s,
        vocab,
        d,
    );
    let dz = linear_back_input(&dlogits, s, head, vocab, d);
    let mut dh = rmsnorm_backward(
        &dz,
        &fwd.h_final,
        &fwd.rms_final,
        &p[layout.final_norm..layout.final_norm + d],
        &mut grad[layout.final_norm..layout.final_norm + d],
        s,
        d,
    );

    for (off, cache) in layout.blocks.iter().zip(&fwd.blocks).rev() {
        // MLP: h_out = h_mid + down(silu(gate b) * up b)
        let w_down = &p[off.down..off.down + d * f];
        accum_weight_grad(&mut grad[off.down..off.down + d * f], &dh, &cache.m, s, d, f);
        let dm = linear_back_input(&dh, s, w_down, d, f);
        let mut dgate = vec![0.0; s * f];
        let mut dup = vec![0.0; s * f];
        for i in 0..s * f {
            let g = cache.gate[i];
            let sg = sigmoid(g);
            dup[i] = dm[i] * g * sg;
            dgate[i] = dm[i] * cache.up[i] * sg * (1.0 + g * (1.0 - sg));
        }
        accum_weight_grad(&mut grad[off.gate..off.gate + f * d], &dgate, &cache.b, s, f, d);
        accum_weight_grad(&mut grad[off.up..off.up + f * d], &dup, &cache.b, s, f, d);
        let mut db = linear_back_input(&dgate, s, &p[off.gate..off.gate + f * d], f, d);
        add_in_place(&mut db, &linear_back_input(&dup, s, &p[off.up..off.up + f * d], f, d));
        let dmid = rmsnorm_backward(
            &db,
            &cache.h_mid,
            &cache.rms2,
            &p[off.ln2..off.ln2 + d],
            &mut grad[off.ln2..off.ln2 + d],
            s,
            d,
        );
        add_in_place(&mut dh, &dmid);

        // Attention: h_mid = h_in + o(softmax(q k^T / sqrt d) v)
        accum_weight_grad(&mut grad[off.o..off.o + d * d], &dh, &cache.c, s, d, d);
        let dc = linear_back_input(&dh, s, &p[off.o..off.o + d * d], d, d);
        let mut dq = vec![0.0; s * d];
        let mut dk = vec![0.0; s * d];
        let mut dv = vec![0.0; s * d];
        for t in 0..s {
            let dct = &dc[t * d..(t + 1) * d];
            let row = &cache.att[t * s..t * s + t + 1];
            let mut datt = vec![0.0; t + 1];
            for u in 0..=t {
                let vu = &cache.v[u * d..(u + 1) * d];
                datt[u] = dct.iter().zip(vu).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dv[u * d + j] += row[u] * dct[j];
                }
            }
            let dot: f64 = row.iter().zip(&datt).map(|(a, b)| a * b).sum();
            for u in 0..=t {
                let ds = row[u] * (datt[u] - dot) * inv_sqrt_d;
                if ds == 0.0 {
                    continue;
                }
                for j in 0..d {
                    dq[t * d + j] += ds * cache.k[u * d + j];
                    dk[u * d + j] += ds * cache.q[t * d + j];
                }
            }
        }
        accum_weight_grad(&mut grad[off.q..off.q + d * d], &dq, &cache.a, s, d, d);
        accum_weight_grad(&mut grad[off.k..off.k + d * d], &dk, &cache.a, s, d, d);
        accum_weight_grad(&mut grad[off.v..off.v + d * d], &dv, &cache.a, s, d, d);
        let mut da = linear_back_input(&dq, s, &p[off.q..off.q + d * d], d, d);
        add_in_place(&mut da, &linear_back_input(&dk, s, &p[off.k..off.k + d * d], d, d));
        add_in_place(&mut da, &linear_back_input(&dv, s, &p[off.v..off.v + d * d], d, d));
        let din = rmsnorm_backward(
            &da,
            &cache.h_in,
            &cache.rms1,
            &p[off.ln1..off.ln1 + d],
            &mut grad[off.ln1..off.ln1 + d],
            s,
            d,
        );
        add_in_place(&mut dh, &din);
    }

    for (i, &tok) in fwd.inputs.iter().enumerate() {
        for j in 0..d {
            grad[layout.embed + tok * d + j] += dh[i * d + j];
            grad[layout.pos + i * d + j] += dh[i * d + j];
        }
    }
    grad
}
