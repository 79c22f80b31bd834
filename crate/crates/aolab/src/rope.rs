//! Rotary position embeddings, standard and decoupled.
//!
//! Keys are rotated by the position of the token a slot *holds* (lagging),
//! queries by the position of the token the slot *predicts* (leading). A
//! single score then sees only the relative offset lag − lead, which is what
//! makes any-order decoding cacheable: a slot's key never changes once
//! written.

use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10000.0;

/// Precomputed cos/sin for positions 0…max_pos at every pair frequency.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    head_dim: usize,
    max_pos: usize,
    theta: Vec<f64>,
    /// cos\[m * d/2 + l\] = cos(m·θ_l); sin likewise.
    cos: Vec<f64>,
    sin: Vec<f64>,
}

/// Rotate consecutive pairs (2l, 2l+1) of `v` in place by the given
/// per-pair cos/sin values.
pub fn rotate_pairs_in_place(v: &mut [f64], cos: &[f64], sin: &[f64]) {
    debug_assert_eq!(v.len(), 2 * cos.len());
    for l in 0..cos.len() {
        let x = v[2 * l];
        let y = v[2 * l + 1];
        v[2 * l] = x * cos[l] - y * sin[l];
        v[2 * l + 1] = x * sin[l] + y * cos[l];
    }
}

impl RotaryTable {
    pub fn new(head_dim: usize, max_pos: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "rotary head_dim must be positive and even, got {}",
                head_dim
            )));
        }
        let half = head_dim / 2;
        let theta: Vec<f64> = (0..half)
            .map(|l| ROPE_BASE.powf(-2.0 * l as f64 / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity((max_pos + 1) * half);
        let mut sin = Vec::with_capacity((max_pos + 1) * half);
        for m in 0..=max_pos {
            for &t in &theta {
                let (s, c) = (m as f64 * t).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Ok(RotaryTable {
            head_dim,
            max_pos,
            theta,
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_pos(&self) -> usize {
        self.max_pos
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn check_pos(&self, m: usize) -> Result<()> {
        if m > self.max_pos {
            return Err(Error::PositionOutOfCache {
                pos: m,
                max: self.max_pos,
            });
        }
        Ok(())
    }

    /// cos row for position m (d/2 entries).
    pub fn cos_row(&self, m: usize) -> &[f64] {
        let half = self.head_dim / 2;
        &self.cos[m * half..(m + 1) * half]
    }

    /// sin row for position m (d/2 entries).
    pub fn sin_row(&self, m: usize) -> &[f64] {
        let half = self.head_dim / 2;
        &self.sin[m * half..(m + 1) * half]
    }

    /// Rotate pairs of `v` in place by the angles of position `m`.
    pub fn rotate_in_place(&self, v: &mut [f64], m: usize) -> Result<()> {
        self.check_pos(m)?;
        if v.len() != self.head_dim {
            return Err(Error::shape(
                "rotate",
                format!("vector of {} vs head_dim {}", v.len(), self.head_dim),
            ));
        }
        rotate_pairs_in_place(v, self.cos_row(m), self.sin_row(m));
        Ok(())
    }

    /// `R(m) v` as a fresh vector.
    pub fn rotate(&self, v: &[f64], m: usize) -> Result<Vec<f64>> {
        let mut out = v.to_vec();
        self.rotate_in_place(&mut out, m)?;
        Ok(out)
    }

    /// Rotate by the *relative* offset `to − from`, which may be negative;
    /// negative angles use cos(−a) = cos a, sin(−a) = −sin a.
    pub fn rotate_rel(&self, v: &[f64], from: usize, to: usize) -> Result<Vec<f64>> {
        self.check_pos(from)?;
        self.check_pos(to)?;
        if v.len() != self.head_dim {
            return Err(Error::shape(
                "rotate_rel",
                format!("vector of {} vs head_dim {}", v.len(), self.head_dim),
            ));
        }
        let (m, flip) = if to >= from {
            (to - from, 1.0)
        } else {
            (from - to, -1.0)
        };
        let half = self.head_dim / 2;
        let cos = self.cos_row(m);
        let sin = self.sin_row(m);
        let mut out = v.to_vec();
        for l in 0..half {
            let s = flip * sin[l];
            let x = out[2 * l];
            let y = out[2 * l + 1];
            out[2 * l] = x * cos[l] - y * s;
            out[2 * l + 1] = x * s + y * cos[l];
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Residual of the relative-position identity:
/// |(R(i)q)·(R(j)k) − q·(R(j−i)k)|.
pub fn rel_identity_check(
    q: &[f64],
    k: &[f64],
    i: usize,
    j: usize,
    table: &RotaryTable,
) -> Result<f64> {
    let lhs = dot(&table.rotate(q, i)?, &table.rotate(k, j)?);
    let rhs = dot(q, &table.rotate_rel(k, i, j)?);
    Ok((lhs - rhs).abs())
}

/// Decoupled score via separate rotations:
/// (R(lead_s) q_s)·(R(lag_t) k_t) / √d.
pub fn decoupled_score(
    q_s: &[f64],
    k_t: &[f64],
    lead_s: usize,
    lag_t: usize,
    table: &RotaryTable,
) -> Result<f64> {
    let d = table.head_dim() as f64;
    let q_rot = table.rotate(q_s, lead_s)?;
    let k_rot = table.rotate(k_t, lag_t)?;
    Ok(dot(&q_rot, &k_rot) / d.sqrt())
}

/// The same score via one relative rotation of the key:
/// q_s·(R(lag_t − lead_s) k_t) / √d.
pub fn decoupled_score_relative(
    q_s: &[f64],
    k_t: &[f64],
    lead_s: usize,
    lag_t: usize,
    table: &RotaryTable,
) -> Result<f64> {
    let d = table.head_dim() as f64;
    let k_rel = table.rotate_rel(k_t, lead_s, lag_t)?;
    Ok(dot(q_s, &k_rel) / d.sqrt())
}
