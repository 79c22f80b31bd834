//! Tape-based forward passes for both wirings.

use std::rc::Rc;

use super::{ModelConfig, ModelMode, Weights};
use crate::data::Token;
use crate::error::{Error, Result};
use crate::ordering::OrderPlan;
use crate::rope::RotaryTable;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Weight tensors loaded onto a tape, in registry order.
pub struct ModelVars {
    vars: Vec<Var>,
    names: Vec<String>,
    n_layers: usize,
}

// registry offsets inside one layer's block of ten tensors
const L_ATTN_GAIN: usize = 0;
const L_ATTN_BIAS: usize = 1;
const L_WQ: usize = 2;
const L_WK: usize = 3;
const L_WV: usize = 4;
const L_WO: usize = 5;
const L_FF_GAIN: usize = 6;
const L_FF_BIAS: usize = 7;
const L_W_IN: usize = 8;
const L_W_OUT: usize = 9;
const LAYER_STRIDE: usize = 10;

impl ModelVars {
    /// Copy every weight tensor onto `tape` as a leaf.
    pub fn load(tape: &mut Tape, weights: &Weights, trainable: bool) -> ModelVars {
        let mut vars = Vec::new();
        let mut names = Vec::new();
        for (name, t) in weights.tensors() {
            vars.push(tape.leaf(t.clone(), trainable));
            names.push(name);
        }
        ModelVars {
            vars,
            names,
            n_layers: weights.layers.len(),
        }
    }

    pub fn embed(&self) -> Var {
        self.vars[0]
    }

    fn layer(&self, i: usize, offset: usize) -> Var {
        self.vars[1 + i * LAYER_STRIDE + offset]
    }

    pub fn final_norm_gain(&self) -> Var {
        self.vars[self.vars.len() - 3]
    }

    pub fn final_norm_bias(&self) -> Var {
        self.vars[self.vars.len() - 2]
    }

    pub fn head(&self) -> Var {
        self.vars[self.vars.len() - 1]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Gradients for every weight, in registry order. Parameters the loss
    /// never touched come back as zero buffers.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| match grads.get(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(v).numel()],
            })
            .collect()
    }
}

/// Lower-triangular-inclusive attention mask: slot s sees slots 0…s.
pub fn causal_mask(n_slots: usize) -> Rc<Tensor> {
    let mut m = vec![0.0; n_slots * n_slots];
    for s in 0..n_slots {
        for t in (s + 1)..n_slots {
            m[s * n_slots + t] = f64::NEG_INFINITY;
        }
    }
    Rc::new(Tensor::new(vec![n_slots, n_slots], m).unwrap())
}

fn angle_rows(table: &RotaryTable, positions: &[usize]) -> Result<(Rc<Vec<f64>>, Rc<Vec<f64>>)> {
    let half = table.head_dim() / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        if p > table.max_pos() {
            return Err(Error::PositionOutOfCache {
                pos: p,
                max: table.max_pos(),
            });
        }
        cos.extend_from_slice(table.cos_row(p));
        sin.extend_from_slice(table.sin_row(p));
    }
    Ok((Rc::new(cos), Rc::new(sin)))
}

struct AttnRotation {
    q_cos: Rc<Vec<f64>>,
    q_sin: Rc<Vec<f64>>,
    k_cos: Rc<Vec<f64>>,
    k_sin: Rc<Vec<f64>>,
}

/// One pre-norm block: attention plus feed-forward, both residual.
fn block(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    layer: usize,
    x: Var,
    rot: &AttnRotation,
    mask: Option<&Rc<Tensor>>,
) -> Result<Var> {
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let xn = tape.layer_norm(
        x,
        vars.layer(layer, L_ATTN_GAIN),
        vars.layer(layer, L_ATTN_BIAS),
        1e-5,
    )?;
    let q = tape.matmul(xn, vars.layer(layer, L_WQ))?;
    let k = tape.matmul(xn, vars.layer(layer, L_WK))?;
    let v = tape.matmul(xn, vars.layer(layer, L_WV))?;

    let mut head_outs = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let q_h = tape.slice_cols(q, h * hd, hd)?;
        let k_h = tape.slice_cols(k, h * hd, hd)?;
        let v_h = tape.slice_cols(v, h * hd, hd)?;
        let q_h = tape.rotate_pairs(q_h, Rc::clone(&rot.q_cos), Rc::clone(&rot.q_sin))?;
        let k_h = tape.rotate_pairs(k_h, Rc::clone(&rot.k_cos), Rc::clone(&rot.k_sin))?;
        let kt = tape.transpose(k_h)?;
        let scores = tape.matmul(q_h, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = match mask {
            Some(m) => tape.masked_softmax_rows(scores, m)?,
            None => tape.softmax_rows(scores)?,
        };
        head_outs.push(tape.matmul(attn, v_h)?);
    }
    let ctx = tape.concat(&head_outs, 1)?;
    let attn_out = tape.matmul(ctx, vars.layer(layer, L_WO))?;
    let x = tape.add(x, attn_out)?;

    let xn = tape.layer_norm(
        x,
        vars.layer(layer, L_FF_GAIN),
        vars.layer(layer, L_FF_BIAS),
        1e-5,
    )?;
    let ff = tape.matmul(xn, vars.layer(layer, L_W_IN))?;
    let ff = tape.gelu(ff)?;
    let ff = tape.matmul(ff, vars.layer(layer, L_W_OUT))?;
    tape.add(x, ff)
}

fn finish(tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
    let xn = tape.layer_norm(x, vars.final_norm_gain(), vars.final_norm_bias(), 1e-5)?;
    tape.matmul(xn, vars.head())
}

/// Causal forward over one order plan. Row s of the result parameterizes the
/// token at semantic position `lead_pos[s]` given slots 0…s; the final row
/// is the terminal slot and carries no prediction.
pub fn forward_drope(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    table: &RotaryTable,
    plan: &OrderPlan,
) -> Result<Var> {
    if config.mode != ModelMode::DropeDecoder {
        return Err(Error::invalid("forward_drope needs a drope_decoder config"));
    }
    if plan.n > config.max_seq_len {
        return Err(Error::Overlength {
            len: plan.n,
            max: config.max_seq_len,
        });
    }
    let indices: Vec<usize> = plan.tokens_structural.iter().map(|&t| t as usize).collect();
    let x = tape.gather(vars.embed(), &indices)?;
    let (q_cos, q_sin) = angle_rows(table, &plan.lead_pos)?;
    let (k_cos, k_sin) = angle_rows(table, &plan.lag_pos)?;
    let rot = AttnRotation {
        q_cos,
        q_sin,
        k_cos,
        k_sin,
    };
    let mask = causal_mask(plan.n_slots());
    let mut x = x;
    for layer in 0..vars.n_layers {
        x = block(tape, vars, config, layer, x, &rot, Some(&mask))?;
    }
    finish(tape, vars, x)
}

/// Bidirectional forward over a (possibly masked) token row. Queries and
/// keys rotate by each token's own semantic position.
pub fn forward_mdlm(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    table: &RotaryTable,
    tokens: &[Token],
    positions: &[usize],
) -> Result<Var> {
    if config.mode != ModelMode::MdlmEncoder {
        return Err(Error::invalid("forward_mdlm needs an mdlm_encoder config"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Overlength {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if tokens.len() != positions.len() {
        return Err(Error::shape(
            "forward_mdlm",
            format!("{} tokens vs {} positions", tokens.len(), positions.len()),
        ));
    }
    for &t in tokens {
        if (t as usize) >= config.vocab_size {
            return Err(Error::InvalidTokenId(t as usize));
        }
    }
    let indices: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let x = tape.gather(vars.embed(), &indices)?;
    let (cos, sin) = angle_rows(table, positions)?;
    let rot = AttnRotation {
        q_cos: Rc::clone(&cos),
        q_sin: Rc::clone(&sin),
        k_cos: cos,
        k_sin: sin,
    };
    let mut x = x;
    for layer in 0..vars.n_layers {
        x = block(tape, vars, config, layer, x, &rot, None)?;
    }
    finish(tape, vars, x)
}

/// Value-only convenience: run [`forward_drope`] on a fresh tape and return
/// the logits tensor.
pub fn drope_logits(
    weights: &Weights,
    config: &ModelConfig,
    table: &RotaryTable,
    plan: &OrderPlan,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ModelVars::load(&mut tape, weights, false);
    let logits = forward_drope(&mut tape, &vars, config, table, plan)?;
    Ok(tape.value(logits).clone())
}

/// Value-only convenience for the encoder wiring.
pub fn mdlm_logits(
    weights: &Weights,
    config: &ModelConfig,
    table: &RotaryTable,
    tokens: &[Token],
    positions: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ModelVars::load(&mut tape, weights, false);
    let logits = forward_mdlm(&mut tape, &vars, config, table, tokens, positions)?;
    Ok(tape.value(logits).clone())
}
