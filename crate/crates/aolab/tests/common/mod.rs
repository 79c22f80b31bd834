//! Exact oracles shared between the objective tests and the acceptance gate.
#![allow(dead_code)]

use aolab::data::{Token, BOS};
use aolab::model::{drope_logits, ModelConfig, Weights};
use aolab::ordering::{sample_permutation, OrderPlan, Permutation, RESERVED_POS};
use aolab::rng::{stream, Purpose};
use aolab::rope::RotaryTable;
use aolab::sampling::{draw_token, SampleConfig};
use aolab::tensor::Tensor;

pub const LN_V: f64 = 3.367_295_829_986_474; // ln 29

/// A fully specified joint over {a, b}^3, with exact conditionals. Token ids
/// 1 and 2 stand for the two symbols; id 0 is never predicted.
pub struct ToyJoint {
    p: [f64; 8],
}

impl ToyJoint {
    pub fn skewed() -> Self {
        // arbitrary strictly positive masses, deliberately non-uniform and
        // non-factorized so conditionals depend on every observed position
        let raw = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let z: f64 = raw.iter().sum();
        let mut p = [0.0; 8];
        for (i, r) in raw.iter().enumerate() {
            p[i] = r / z;
        }
        ToyJoint { p }
    }

    fn index(seq: &[Token; 3]) -> usize {
        ((seq[0] - 1) as usize) << 2 | ((seq[1] - 1) as usize) << 1 | ((seq[2] - 1) as usize)
    }

    pub fn joint(&self, seq: &[Token; 3]) -> f64 {
        self.p[Self::index(seq)]
    }

    pub fn sequences() -> Vec<[Token; 3]> {
        let mut all = Vec::new();
        for a in 1..=2u8 {
            for b in 1..=2u8 {
                for c in 1..=2u8 {
                    all.push([a, b, c]);
                }
            }
        }
        all
    }

    /// p(x_q = v | the observed positions), marginalizing everything else.
    pub fn conditional(&self, observed: &[(usize, Token)], q: usize, v: Token) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for seq in Self::sequences() {
            if observed.iter().any(|&(pos, val)| seq[pos] != val) {
                continue;
            }
            let mass = self.joint(&seq);
            den += mass;
            if seq[q] == v {
                num += mass;
            }
        }
        num / den
    }

    /// Logit row encoding the exact conditional at `q`: ln p over ids 1, 2.
    pub fn conditional_row(&self, observed: &[(usize, Token)], q: usize) -> [f64; 3] {
        [
            f64::NEG_INFINITY,
            self.conditional(observed, q, 1).ln(),
            self.conditional(observed, q, 2).ln(),
        ]
    }
}

/// Logits for one ordering of one sequence, rows being exact conditionals.
pub fn oracle_ao_logits(joint: &ToyJoint, seq: &[Token; 3], pi: &Permutation) -> Tensor {
    let mut rows = Vec::new();
    for s in 0..3 {
        let observed: Vec<(usize, Token)> = (0..s)
            .map(|t| {
                let p = pi.slot_to_pos(t);
                (p, seq[p])
            })
            .collect();
        rows.extend_from_slice(&joint.conditional_row(&observed, pi.slot_to_pos(s)));
    }
    rows.extend_from_slice(&[0.0, 0.0, 0.0]); // terminal slot, weight zero
    Tensor::new(vec![4, 3], rows).unwrap()
}

/// Logits for one mask pattern: exact conditionals at masked rows given the
/// unmasked rest (other masked positions marginalized out).
pub fn oracle_mdlm_logits(joint: &ToyJoint, seq: &[Token; 3], masked: &[bool; 3]) -> Tensor {
    let observed: Vec<(usize, Token)> = (0..3).filter(|&i| !masked[i]).map(|i| (i, seq[i])).collect();
    let mut rows = Vec::new();
    for i in 0..3 {
        if masked[i] {
            rows.extend_from_slice(&joint.conditional_row(&observed, i));
        } else {
            rows.extend_from_slice(&[0.0, 0.0, 0.0]);
        }
    }
    Tensor::new(vec![3, 3], rows).unwrap()
}

pub fn all_permutations_of_3() -> Vec<Permutation> {
    [
        [0usize, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ]
    .iter()
    .map(|p| Permutation::new(p.to_vec()).unwrap())
    .collect()
}

/// Same draws as `sample_drope`, but every step reruns the whole prefix
/// through the batch forward instead of touching a cache.
pub fn sample_drope_recompute(
    weights: &Weights,
    config: &ModelConfig,
    table: &RotaryTable,
    sc: &SampleConfig,
    sample_index: u64,
) -> Vec<Token> {
    let n = sc.seq_len;
    let mut order_rng = stream(sc.seed, Purpose::SampleOrder, sample_index);
    let mut token_rng = stream(sc.seed, Purpose::SampleToken, sample_index);
    let pi = sample_permutation(&mut order_rng, n).unwrap();

    let mut structural: Vec<Token> = Vec::new();
    for t in 0..n {
        let mut tokens_structural = vec![BOS];
        tokens_structural.extend_from_slice(&structural);
        let mut lag_pos = vec![RESERVED_POS];
        for s in 0..t {
            lag_pos.push(pi.slot_to_pos(s) + 1);
        }
        let lead_pos: Vec<usize> = (0..=t).map(|s| pi.slot_to_pos(s) + 1).collect();
        let plan = OrderPlan {
            n: t,
            tokens_structural: tokens_structural.clone(),
            lag_pos,
            lead_pos,
            target_structural: vec![BOS; t + 1],
        };
        let logits = drope_logits(weights, config, table, &plan).unwrap();
        let tok = draw_token(&mut token_rng, logits.row(t), sc.temperature).unwrap();
        structural.push(tok);
    }

    let inv = pi.invert();
    (0..n).map(|p| structural[inv.slot_to_pos(p)]).collect()
}
