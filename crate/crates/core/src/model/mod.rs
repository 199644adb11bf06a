//! A small decoder-only language model with exact parameter gradients.
//!
//! Each block is pre-norm: RMSNorm, single-head causal self-attention, RMSNorm,
//! then a SiLU-gated MLP (`gate_proj`, `up_proj`, `down_proj`). Tokens get a
//! learned token embedding plus a learned position embedding; the head is an
//! untied `lm_head`. Parameter names follow the common decoder checkpoint
//! convention so the topology parser classifies them like a real model.
//!
//! Parameters are held in f64 so that finite-difference oracles have headroom;
//! checkpoints round them to f32.

mod backprop;
pub mod corpus;
mod train;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{Tensor, TensorArchive};
use crate::error::{Error, Result};

pub use train::{train_to_convergence, TrainOptions, TrainReport};

/// Upper bound on model size; keeps dense finite-difference Hessians cheap.
pub const MAX_PARAMS: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicroModelConfig {
    pub vocab_size: usize,
    /// Maximum sequence length (size of the position table).
    pub seq_len: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub seed: u64,
    /// Multiplier on the default initialization standard deviations.
    pub init_scale: f64,
}

impl Default for MicroModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 64,
            n_layers: 4,
            hidden_dim: 16,
            ffn_dim: 32,
            seed: 42,
            init_scale: 1.0,
        }
    }
}

impl MicroModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2
            || self.seq_len < 2
            || self.n_layers == 0
            || self.hidden_dim == 0
            || self.ffn_dim == 0
        {
            return Err(Error::InvalidArgument(format!(
                "degenerate micro-model config: {self:?}"
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::InvalidArgument("init_scale must be finite and >= 0".into()));
        }
        let n = ParamLayout::new(self).n_params();
        if n > MAX_PARAMS {
            return Err(Error::InvalidArgument(format!(
                "config has {n} parameters, limit is {MAX_PARAMS}"
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = crate::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub ln1: usize,
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
    pub ln2: usize,
    pub gate: usize,
    pub up: usize,
    pub down: usize,
}

/// Positions of every named tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    by_name: HashMap<String, usize>,
    pub(crate) embed: usize,
    pub(crate) pos: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) final_norm: usize,
    pub(crate) head: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &MicroModelConfig) -> Self {
        let (v, t, d, f) = (cfg.vocab_size, cfg.seq_len, cfg.hidden_dim, cfg.ffn_dim);
        let mut slots = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            let offset = total;
            slots.push(ParamSlot {
                name,
                shape,
                offset,
                len,
            });
            total += len;
            offset
        };
        let embed = push("model.embed_tokens.weight".into(), vec![v, d]);
        let pos = push("model.embed_positions.weight".into(), vec![t, d]);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = format!("model.layers.{i}");
            blocks.push(BlockOffsets {
                ln1: push(format!("{p}.input_layernorm.weight"), vec![d]),
                q: push(format!("{p}.self_attn.q_proj.weight"), vec![d, d]),
                k: push(format!("{p}.self_attn.k_proj.weight"), vec![d, d]),
                v: push(format!("{p}.self_attn.v_proj.weight"), vec![d, d]),
                o: push(format!("{p}.self_attn.o_proj.weight"), vec![d, d]),
                ln2: push(format!("{p}.post_attention_layernorm.weight"), vec![d]),
                gate: push(format!("{p}.mlp.gate_proj.weight"), vec![f, d]),
                up: push(format!("{p}.mlp.up_proj.weight"), vec![f, d]),
                down: push(format!("{p}.mlp.down_proj.weight"), vec![d, f]),
            });
        }
        let final_norm = push("model.norm.weight".into(), vec![d]);
        let head = push("lm_head.weight".into(), vec![v, d]);
        let by_name = slots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Self {
            slots,
            by_name,
            embed,
            pos,
            blocks,
            final_norm,
            head,
            total,
        }
    }

    pub fn n_params(&self) -> usize {
        self.total
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.by_name.get(name).map(|&i| &self.slots[i])
    }

    /// Split a flat vector into a named archive (values rounded to f32).
    pub fn to_archive(&self, flat: &[f64]) -> TensorArchive {
        let mut a = TensorArchive::new();
        for s in &self.slots {
            a.set(
                s.name.clone(),
                Tensor::from_f64(s.shape.clone(), &flat[s.offset..s.offset + s.len])
                    .expect("slot shape matches its length"),
            );
        }
        a
    }

    /// Flatten an archive with exactly this layout's names and shapes.
    pub fn flatten(&self, archive: &TensorArchive) -> Result<Vec<f64>> {
        if archive.len() != self.slots.len() {
            return Err(Error::Misaligned(format!(
                "archive has {} tensors, model expects {}",
                archive.len(),
                self.slots.len()
            )));
        }
        let mut flat = vec![0.0; self.total];
        for s in &self.slots {
            let t = archive
                .get(&s.name)
                .ok_or_else(|| Error::Misaligned(format!("missing tensor `{}`", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Misaligned(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            for (dst, &src) in flat[s.offset..s.offset + s.len].iter_mut().zip(t.data()) {
                *dst = src as f64;
            }
        }
        Ok(flat)
    }
}

/// Exact gradient of the mean next-token NLL.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub loss: f64,
    pub flat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MicroModel {
    config: MicroModelConfig,
    layout: Arc<ParamLayout>,
    params: Vec<f64>,
}

impl MicroModel {
    /// Randomly initialized model, deterministic in `config.seed`. Initial
    /// values are rounded to f32 so a checkpoint round trip is lossless.
    pub fn new(config: MicroModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; layout.n_params()];
        let scale = config.init_scale;
        for slot in layout.slots() {
            let std = if slot.name.ends_with("norm.weight") {
                0.0
            } else if slot.name.contains("embed_tokens") {
                scale
            } else if slot.name.contains("embed_positions") {
                0.5 * scale
            } else {
                scale / (slot.shape[1] as f64).sqrt()
            };
            let dst = &mut params[slot.offset..slot.offset + slot.len];
            if slot.name.ends_with("norm.weight") {
                dst.fill(1.0);
            } else {
                let normal = Normal::new(0.0, std).expect("finite std");
                for x in dst.iter_mut() {
                    *x = normal.sample(&mut rng) as f32 as f64;
                }
            }
        }
        Ok(Self {
            config,
            layout: Arc::new(layout),
            params,
        })
    }

    pub fn from_params(config: MicroModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.n_params() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                layout.n_params(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout: Arc::new(layout),
            params,
        })
    }

    pub fn from_archive(config: MicroModelConfig, archive: &TensorArchive) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let params = layout.flatten(archive)?;
        Ok(Self {
            config,
            layout: Arc::new(layout),
            params,
        })
    }

    /// Same architecture, different parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), self.params.len(), "parameter count mismatch");
        Self {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            params,
        }
    }

    pub fn config(&self) -> &MicroModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn to_archive(&self) -> TensorArchive {
        self.layout.to_archive(&self.params)
    }

    /// Round every parameter to the nearest f32.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.params {
            *x = *x as f32 as f64;
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() < 2 || tokens.len() > self.config.seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} outside [2, {}]",
                tokens.len(),
                self.config.seq_len
            )));
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Mean next-token negative log-likelihood in nats.
    pub fn forward_nll(&self, tokens: &[usize]) -> Result<f64> {
        self.forward_nll_at(&self.params, tokens)
    }

    /// [`forward_nll`](Self::forward_nll) evaluated at an arbitrary parameter
    /// vector of this architecture.
    pub fn forward_nll_at(&self, params: &[f64], tokens: &[usize]) -> Result<f64> {
        self.check_tokens(tokens)?;
        let fwd = backprop::forward(&self.config, &self.layout, params, tokens);
        Ok(fwd.nll())
    }

    pub fn backward_nll(&self, tokens: &[usize]) -> Result<Gradient> {
        self.backward_nll_at(&self.params, tokens)
    }

    pub fn backward_nll_at(&self, params: &[f64], tokens: &[usize]) -> Result<Gradient> {
        self.check_tokens(tokens)?;
        let fwd = backprop::forward(&self.config, &self.layout, params, tokens);
        let flat = backprop::backward(&self.config, &self.layout, params, &fwd);
        Ok(Gradient {
            loss: fwd.nll(),
            flat,
        })
    }

    /// Gradient as an archive mirroring the parameter names and shapes.
    pub fn gradient_archive(&self, tokens: &[usize]) -> Result<TensorArchive> {
        Ok(self.layout.to_archive(&self.backward_nll(tokens)?.flat))
    }

    /// Log-probability of each target token `tokens[1..]` given its prefix.
    pub fn token_log_probs_at(&self, params: &[f64], tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let fwd = backprop::forward(&self.config, &self.layout, params, tokens);
        Ok(fwd.target_log_probs())
    }

    /// Full next-token distributions, one row per predicted position.
    pub fn next_token_probs(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let fwd = backprop::forward(&self.config, &self.layout, &self.params, tokens);
        Ok(fwd.probabilities())
    }

    /// Mean log-probability of the probe continuations: the scalar model
    /// output used by the merge-error analysis.
    pub fn scalar_output(&self, probes: &[Vec<usize>]) -> Result<f64> {
        self.scalar_output_at(&self.params, probes)
    }

    pub fn scalar_output_at(&self, params: &[f64], probes: &[Vec<usize>]) -> Result<f64> {
        if probes.is_empty() {
            return Err(Error::InvalidArgument("probe set is empty".into()));
        }
        let mut acc = 0.0;
        for p in probes {
            acc -= self.forward_nll_at(params, p)?;
        }
        Ok(acc / probes.len() as f64)
    }

    /// Gradient of [`scalar_output_at`](Self::scalar_output_at).
    pub fn scalar_output_grad_at(&self, params: &[f64], probes: &[Vec<usize>]) -> Result<Vec<f64>> {
        if probes.is_empty() {
            return Err(Error::InvalidArgument("probe set is empty".into()));
        }
        let mut acc = vec![0.0; params.len()];
        for p in probes {
            let g = self.backward_nll_at(params, p)?;
            for (a, x) in acc.iter_mut().zip(&g.flat) {
                *a -= x;
            }
        }
        let n = probes.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}
