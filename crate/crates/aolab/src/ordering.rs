//! Permutations over semantic positions and the slot bookkeeping for
//! any-order generation.
//!
//! A sequence is generated slot by slot in some order π. Each structural slot
//! carries two positions: the *lagging* position of the token it holds, and
//! the *leading* position of the token it predicts next. A BOS slot is
//! prepended at slot 0 so the first real token has a predicting slot; the
//! reserved semantic index 0 belongs to BOS, real positions are shifted to
//! 1…n.

use itertools::Itertools;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Token;
use crate::error::{Error, Result};

/// Semantic index reserved for the BOS slot and the terminal sentinel.
pub const RESERVED_POS: usize = 0;

/// A bijection on {0,…,n−1}: slot t holds the token at semantic position
/// `pi[t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    pi: Vec<usize>,
}

impl Permutation {
    /// Validate and wrap an explicit slot→position map.
    pub fn new(pi: Vec<usize>) -> Result<Self> {
        let n = pi.len();
        let mut seen = vec![false; n];
        for &p in &pi {
            if p >= n {
                return Err(Error::InvalidPermutation(format!(
                    "value {} out of range for length {}",
                    p, n
                )));
            }
            if seen[p] {
                return Err(Error::InvalidPermutation(format!("value {} repeats", p)));
            }
            seen[p] = true;
        }
        Ok(Permutation { pi })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            pi: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// Semantic position held by structural slot `t`.
    pub fn slot_to_pos(&self, t: usize) -> usize {
        self.pi[t]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.pi
    }

    /// The inverse map: position → slot.
    pub fn invert(&self) -> Permutation {
        let mut inv = vec![0; self.pi.len()];
        for (t, &p) in self.pi.iter().enumerate() {
            inv[p] = t;
        }
        Permutation { pi: inv }
    }
}

/// Uniform permutation of length `n` by Fisher–Yates.
pub fn sample_permutation(rng: &mut ChaCha8Rng, n: usize) -> Result<Permutation> {
    if n == 0 {
        return Err(Error::invalid("cannot sample a permutation of length 0"));
    }
    let mut pi: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        pi.swap(i, j);
    }
    Ok(Permutation { pi })
}

/// Everything a causal pass needs to train or decode one ordering of one
/// sequence, BOS slot included.
///
/// Slot 0 is BOS. Slot t ≥ 1 holds the token at semantic position
/// `pi[t-1]` (shifted to 1-based), predicts the token of slot t+1, and the
/// final slot predicts nothing (its leading position is the reserved index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderPlan {
    /// Real-token count (slots are `n + 1` with BOS).
    pub n: usize,
    /// Token ids in generation order; `[0]` is the BOS id.
    pub tokens_structural: Vec<Token>,
    /// lag_pos[t]: shifted semantic position of slot t's token (BOS → 0).
    pub lag_pos: Vec<usize>,
    /// lead_pos[t]: shifted semantic position the slot predicts; the final
    /// slot gets the reserved sentinel 0.
    pub lead_pos: Vec<usize>,
    /// target_structural[t] = tokens_structural[t+1]; the final slot repeats
    /// BOS as a placeholder and must carry zero loss weight.
    pub target_structural: Vec<Token>,
}

impl OrderPlan {
    pub fn n_slots(&self) -> usize {
        self.n + 1
    }

    /// Loss weights that cover exactly the real predictions: 1.0 for slots
    /// 0…n−1, 0.0 for the terminal slot.
    pub fn uniform_loss_weights(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.n_slots()];
        w[self.n] = 0.0;
        w
    }
}

/// Arrange `tokens_semantic` into generation order under `pi`.
pub fn build_order_plan(tokens_semantic: &[Token], pi: &Permutation, bos: Token) -> Result<OrderPlan> {
    let n = tokens_semantic.len();
    if pi.len() != n {
        return Err(Error::shape(
            "build_order_plan",
            format!("{} tokens but permutation of length {}", n, pi.len()),
        ));
    }
    let mut tokens_structural = Vec::with_capacity(n + 1);
    let mut lag_pos = Vec::with_capacity(n + 1);
    let mut lead_pos = Vec::with_capacity(n + 1);
    tokens_structural.push(bos);
    lag_pos.push(RESERVED_POS);
    for t in 0..n {
        let p = pi.slot_to_pos(t);
        tokens_structural.push(tokens_semantic[p]);
        lag_pos.push(p + 1);
        lead_pos.push(p + 1);
    }
    lead_pos.push(RESERVED_POS);

    let mut target_structural: Vec<Token> = tokens_structural[1..].to_vec();
    target_structural.push(bos);

    Ok(OrderPlan {
        n,
        tokens_structural,
        lag_pos,
        lead_pos,
        target_structural,
    })
}

/// How [`adjacent_distance_stats`] averaged over orderings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMode {
    /// Enumerate all n! permutations; only for n ≤ 8.
    Exact,
    /// Monte-Carlo over this many uniform draws.
    Sampled(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceStats {
    pub n: usize,
    pub mean_adjacent_structural_distance: f64,
    pub mode: DistanceMode,
}

const EXACT_ENUMERATION_MAX: usize = 8;

fn mean_adjacent_distance(slot_of: &[usize]) -> f64 {
    let n = slot_of.len();
    let total: usize = (0..n - 1)
        .map(|i| slot_of[i].abs_diff(slot_of[i + 1]))
        .sum();
    total as f64 / (n - 1) as f64
}

/// Mean structural distance between semantically adjacent tokens under
/// uniform orderings.
pub fn adjacent_distance_stats(
    n: usize,
    mode: DistanceMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<DistanceStats> {
    if n < 2 {
        return Err(Error::invalid(
            "adjacent distance needs at least two tokens",
        ));
    }
    let mean = match mode {
        DistanceMode::Exact => {
            if n > EXACT_ENUMERATION_MAX {
                return Err(Error::invalid(format!(
                    "exact enumeration is capped at n = {} (asked for {})",
                    EXACT_ENUMERATION_MAX, n
                )));
            }
            // iterate slot→position assignments; invert to position→slot
            let mut acc = 0.0;
            let mut count = 0usize;
            for perm in (0..n).permutations(n) {
                let mut slot_of = vec![0; n];
                for (slot, &pos) in perm.iter().enumerate() {
                    slot_of[pos] = slot;
                }
                acc += mean_adjacent_distance(&slot_of);
                count += 1;
            }
            acc / count as f64
        }
        DistanceMode::Sampled(draws) => {
            if draws == 0 {
                return Err(Error::invalid("sampled mode needs at least one draw"));
            }
            let rng = rng.ok_or_else(|| Error::invalid("sampled mode needs an rng"))?;
            let mut acc = 0.0;
            for _ in 0..draws {
                let pi = sample_permutation(rng, n)?;
                acc += mean_adjacent_distance(pi.invert().as_slice());
            }
            acc / draws as f64
        }
    };
    Ok(DistanceStats {
        n,
        mean_adjacent_structural_distance: mean,
        mode,
    })
}
