//! KV-cached incremental decoding for the causal wiring.
//!
//! The whole point of rotating keys by lagging position is that a slot's key
//! never changes once computed, so decode appends one rotated k/v per slot
//! and only ever recomputes the query side. The arithmetic below mirrors the
//! full forward exactly — same kernels, same accumulation order — so
//! incremental logits agree with a full recompute at the bit level.

use super::{ModelConfig, ModelMode, Weights};
use crate::data::Token;
use crate::error::{Error, Result};
use crate::rope::{rotate_pairs_in_place, RotaryTable};
use crate::tensor::{gelu_scalar, layer_norm_row, matmul_nn, softmax_row};

/// Per-layer rotated key/value history for one decode stream.
pub struct KVCache {
    capacity: usize,
    fill: usize,
    lag_pos: Vec<usize>,
    /// Per layer, `[capacity * d_model]` with slot-major rows.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KVCache {
    pub fn new(config: &ModelConfig, capacity: usize) -> Self {
        KVCache {
            capacity,
            fill: 0,
            lag_pos: Vec::with_capacity(capacity),
            keys: vec![vec![0.0; capacity * config.d_model]; config.n_layers],
            values: vec![vec![0.0; capacity * config.d_model]; config.n_layers],
        }
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Lagging positions of the stored slots, in append order.
    pub fn lag_positions(&self) -> &[usize] {
        &self.lag_pos
    }

    fn slot_row<'a>(buf: &'a [f64], slot: usize, d: usize) -> &'a [f64] {
        &buf[slot * d..(slot + 1) * d]
    }
}

/// Append one structural slot and return its output logits.
///
/// `lag_new` is the (shifted) semantic position of `token`; `lead_new` is the
/// position this slot predicts. Keys/values are stored post-rotation.
pub fn forward_drope_incremental(
    weights: &Weights,
    config: &ModelConfig,
    table: &RotaryTable,
    cache: &mut KVCache,
    token: Token,
    lag_new: usize,
    lead_new: usize,
) -> Result<Vec<f64>> {
    if config.mode != ModelMode::DropeDecoder {
        return Err(Error::invalid(
            "incremental decode needs a drope_decoder config",
        ));
    }
    if cache.fill >= cache.capacity {
        return Err(Error::CacheFull {
            capacity: cache.capacity,
        });
    }
    if (token as usize) >= config.vocab_size {
        return Err(Error::InvalidTokenId(token as usize));
    }
    let d = config.d_model;
    let hd = config.head_dim();
    let n_heads = config.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let slot = cache.fill;

    let mut x = weights.embed.row(token as usize).to_vec();
    let mut xn = vec![0.0; d];
    let mut xhat = vec![0.0; d];

    for (layer, lw) in weights.layers.iter().enumerate() {
        layer_norm_row(
            &x,
            lw.attn_norm_gain.data(),
            lw.attn_norm_bias.data(),
            1e-5,
            &mut xhat,
            &mut xn,
        );
        let mut q = matmul_nn(&xn, lw.wq.data(), 1, d, d);
        let mut k = matmul_nn(&xn, lw.wk.data(), 1, d, d);
        let v = matmul_nn(&xn, lw.wv.data(), 1, d, d);
        for h in 0..n_heads {
            rotate_pairs_in_place(
                &mut q[h * hd..(h + 1) * hd],
                table.cos_row(lead_new),
                table.sin_row(lead_new),
            );
            rotate_pairs_in_place(
                &mut k[h * hd..(h + 1) * hd],
                table.cos_row(lag_new),
                table.sin_row(lag_new),
            );
        }
        cache.keys[layer][slot * d..(slot + 1) * d].copy_from_slice(&k);
        cache.values[layer][slot * d..(slot + 1) * d].copy_from_slice(&v);

        // attention of the new slot over slots 0..=slot, head by head
        let mut ctx = vec![0.0; d];
        for h in 0..n_heads {
            let q_h = &q[h * hd..(h + 1) * hd];
            let mut scores = Vec::with_capacity(slot + 1);
            for t in 0..=slot {
                let k_t = KVCache::slot_row(&cache.keys[layer], t, d);
                let k_th = &k_t[h * hd..(h + 1) * hd];
                let mut acc = 0.0;
                for p in 0..hd {
                    acc += q_h[p] * k_th[p];
                }
                scores.push(acc * scale);
            }
            softmax_row(&mut scores);
            let ctx_h = &mut ctx[h * hd..(h + 1) * hd];
            for (t, &p) in scores.iter().enumerate() {
                let v_t = KVCache::slot_row(&cache.values[layer], t, d);
                let v_th = &v_t[h * hd..(h + 1) * hd];
                for j in 0..hd {
                    ctx_h[j] += p * v_th[j];
                }
            }
        }
        let attn_out = matmul_nn(&ctx, lw.wo.data(), 1, d, d);
        for j in 0..d {
            x[j] += attn_out[j];
        }

        layer_norm_row(
            &x,
            lw.ff_norm_gain.data(),
            lw.ff_norm_bias.data(),
            1e-5,
            &mut xhat,
            &mut xn,
        );
        let mut ff = matmul_nn(&xn, lw.w_in.data(), 1, d, config.d_ff);
        for v in ff.iter_mut() {
            *v = gelu_scalar(*v);
        }
        let ff_out = matmul_nn(&ff, lw.w_out.data(), 1, config.d_ff, d);
        for j in 0..d {
            x[j] += ff_out[j];
        }
    }

    cache.lag_pos.push(lag_new);
    cache.fill += 1;

    layer_norm_row(
        &x,
        weights.final_norm_gain.data(),
        weights.final_norm_bias.data(),
        1e-5,
        &mut xhat,
        &mut xn,
    );
    Ok(matmul_nn(&xn, weights.head.data(), 1, d, config.vocab_size))
}
