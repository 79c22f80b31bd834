//! The transformer backbone in its two wirings.
//!
//! One weight layout serves both modes: a causal decoder over structural
//! slots with decoupled rotations (keys by lagging position, queries by
//! leading position), and a bidirectional encoder with standard rotations on
//! semantic positions for masked-denoising training. Blocks are pre-norm
//! with a GELU feed-forward and an untied output head.

mod cache;
mod checkpoint;
mod forward;

pub(crate) use checkpoint::{config_from_table, config_to_table};

pub use cache::{forward_drope_incremental, KVCache};
pub use checkpoint::{
    load_model, read_checkpoint, save_model, write_checkpoint, Checkpoint, NamedArray,
};
pub use forward::{
    causal_mask, drope_logits, forward_drope, forward_mdlm, mdlm_logits, ModelVars,
};

use crate::data::VOCAB;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::rope::RotaryTable;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelMode {
    DropeDecoder,
    MdlmEncoder,
}

impl ModelMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelMode::DropeDecoder => "drope_decoder",
            ModelMode::MdlmEncoder => "mdlm_encoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "drope_decoder" => Ok(ModelMode::DropeDecoder),
            "mdlm_encoder" => Ok(ModelMode::MdlmEncoder),
            other => Err(Error::invalid(format!("unknown model mode '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::invalid("d_model and n_heads must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::invalid(format!(
                "head_dim {} must be even for pair rotations",
                self.d_model / self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::invalid("vocab_size and max_seq_len must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Rotation cache sized for BOS shift and sentinels.
    pub fn rotary_table(&self) -> Result<RotaryTable> {
        RotaryTable::new(self.head_dim(), 2 * self.max_seq_len + 2)
    }

    /// Smallest preset that can solve the synthetic training-sanity tasks.
    /// Needs both layers: a single attention hop can only copy from the
    /// anchor offsets its rotary basis resonates with, which floors one-layer
    /// models near 0.2 nats/token on periodic data regardless of width.
    pub fn micro(mode: ModelMode) -> Self {
        ModelConfig {
            mode,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 64,
            vocab_size: VOCAB,
            max_seq_len: 64,
            dropout: 0.0,
        }
    }

    /// Small config that trains in seconds on synthetic data.
    pub fn sanity(mode: ModelMode) -> Self {
        ModelConfig {
            mode,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: VOCAB,
            max_seq_len: 64,
            dropout: 0.0,
        }
    }

    /// Default workstation-scale config (≈3.2M params).
    pub fn desk(mode: ModelMode, max_seq_len: usize) -> Self {
        ModelConfig {
            mode,
            n_layers: 4,
            d_model: 256,
            n_heads: 4,
            d_ff: 1024,
            vocab_size: VOCAB,
            max_seq_len,
            dropout: 0.0,
        }
    }

    /// Largest preset (~8M params), sized for full-corpus runs.
    pub fn full_8m(mode: ModelMode, max_seq_len: usize) -> Self {
        ModelConfig {
            mode,
            n_layers: 6,
            d_model: 336,
            n_heads: 6,
            d_ff: 1344,
            vocab_size: VOCAB,
            max_seq_len,
            dropout: 0.0,
        }
    }
}

/// Exact parameter count from the config alone.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let v = config.vocab_size;
    let per_layer = 4 * d * d        // q, k, v, o projections
        + 2 * d * config.d_ff        // feed-forward in/out
        + 4 * d; // two norms, gain + bias each
    v * d                            // embedding
        + config.n_layers * per_layer
        + 2 * d                      // final norm
        + d * v // untied head
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff_norm_gain: Tensor,
    pub ff_norm_bias: Tensor,
    pub w_in: Tensor,
    pub w_out: Tensor,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
    pub head: Tensor,
}

/// Init scale for projection matrices.
const INIT_STD: f64 = 0.02;

impl Weights {
    /// Deterministic Gaussian init; norms start at identity. The output head
    /// starts near zero so an untrained model predicts almost exactly the
    /// uniform distribution.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let mut idx = 0u64;
        let mut randn = |shape: &[usize], std: f64| {
            let t = Tensor::randn(shape, std, &mut stream(seed, Purpose::WeightInit, idx));
            idx += 1;
            t
        };
        let head_std = 0.1 / (d as f64).sqrt();
        let embed = randn(&[v, d], INIT_STD);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm_gain: Tensor::new(vec![1, d], vec![1.0; d]).unwrap(),
                attn_norm_bias: Tensor::zeros(&[1, d]),
                wq: randn(&[d, d], INIT_STD),
                wk: randn(&[d, d], INIT_STD),
                wv: randn(&[d, d], INIT_STD),
                wo: randn(&[d, d], INIT_STD),
                ff_norm_gain: Tensor::new(vec![1, d], vec![1.0; d]).unwrap(),
                ff_norm_bias: Tensor::zeros(&[1, d]),
                w_in: randn(&[d, config.d_ff], INIT_STD),
                w_out: randn(&[config.d_ff, d], INIT_STD),
            })
            .collect();
        Ok(Weights {
            embed,
            layers,
            final_norm_gain: Tensor::new(vec![1, d], vec![1.0; d]).unwrap(),
            final_norm_bias: Tensor::zeros(&[1, d]),
            head: randn(&[d, v], head_std),
        })
    }

    /// Named tensors in a fixed registry order shared by the optimizer, the
    /// checkpoint format, and gradient collection.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embed".into(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{}.attn_norm.gain", i), &l.attn_norm_gain));
            out.push((format!("layer{}.attn_norm.bias", i), &l.attn_norm_bias));
            out.push((format!("layer{}.wq", i), &l.wq));
            out.push((format!("layer{}.wk", i), &l.wk));
            out.push((format!("layer{}.wv", i), &l.wv));
            out.push((format!("layer{}.wo", i), &l.wo));
            out.push((format!("layer{}.ff_norm.gain", i), &l.ff_norm_gain));
            out.push((format!("layer{}.ff_norm.bias", i), &l.ff_norm_bias));
            out.push((format!("layer{}.w_in", i), &l.w_in));
            out.push((format!("layer{}.w_out", i), &l.w_out));
        }
        out.push(("final_norm.gain".into(), &self.final_norm_gain));
        out.push(("final_norm.bias".into(), &self.final_norm_bias));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("embed".into(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{}.attn_norm.gain", i), &mut l.attn_norm_gain));
            out.push((format!("layer{}.attn_norm.bias", i), &mut l.attn_norm_bias));
            out.push((format!("layer{}.wq", i), &mut l.wq));
            out.push((format!("layer{}.wk", i), &mut l.wk));
            out.push((format!("layer{}.wv", i), &mut l.wv));
            out.push((format!("layer{}.wo", i), &mut l.wo));
            out.push((format!("layer{}.ff_norm.gain", i), &mut l.ff_norm_gain));
            out.push((format!("layer{}.ff_norm.bias", i), &mut l.ff_norm_bias));
            out.push((format!("layer{}.w_in", i), &mut l.w_in));
            out.push((format!("layer{}.w_out", i), &mut l.w_out));
        }
        out.push(("final_norm.gain".into(), &mut self.final_norm_gain));
        out.push(("final_norm.bias".into(), &mut self.final_norm_bias));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn param_total(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}
