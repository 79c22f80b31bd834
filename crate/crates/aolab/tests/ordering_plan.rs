//! Order-plan construction and the structural-distance oracle.

use std::collections::HashMap;

use aolab::data::BOS;
use aolab::ordering::{
    adjacent_distance_stats, build_order_plan, sample_permutation, DistanceMode, Permutation,
    RESERVED_POS,
};
use aolab::rng::{stream, Purpose};
use proptest::prelude::*;

#[test]
fn identity_order_is_left_to_right() {
    let tokens = [1u8, 2, 3]; // "abc"
    let plan = build_order_plan(&tokens, &Permutation::identity(3), BOS).unwrap();
    assert_eq!(plan.tokens_structural, vec![BOS, 1, 2, 3]);
    assert_eq!(plan.lag_pos, vec![0, 1, 2, 3]);
    assert_eq!(plan.lead_pos, vec![1, 2, 3, RESERVED_POS]);
    assert_eq!(plan.target_structural[..3], [1, 2, 3]);
}

#[test]
fn hand_worked_plan() {
    // 1-based π = (3,1,2) over tokens (A,B,C) = ids (1,2,3)
    let tokens = [1u8, 2, 3];
    let pi = Permutation::new(vec![2, 0, 1]).unwrap();
    let plan = build_order_plan(&tokens, &pi, BOS).unwrap();
    assert_eq!(plan.tokens_structural, vec![BOS, 3, 1, 2], "generation order C,A,B");
    assert_eq!(plan.lag_pos, vec![0, 3, 1, 2]);
    assert_eq!(plan.lead_pos, vec![3, 1, 2, RESERVED_POS]);
    assert_eq!(plan.target_structural, vec![3, 1, 2, BOS]);
    let w = plan.uniform_loss_weights();
    assert_eq!(w, vec![1.0, 1.0, 1.0, 0.0], "terminal slot carries no loss");
}

#[test]
fn inverting_the_order_restores_semantic_positions() {
    let mut rng = stream(3, Purpose::SampleOrder, 0);
    for n in [1usize, 2, 5, 17] {
        let tokens: Vec<u8> = (0..n).map(|i| (i % 26 + 1) as u8).collect();
        let pi = sample_permutation(&mut rng, n).unwrap();
        let plan = build_order_plan(&tokens, &pi, BOS).unwrap();
        let inv = pi.invert();
        let restored: Vec<u8> = (0..n)
            .map(|pos| plan.tokens_structural[inv.slot_to_pos(pos) + 1])
            .collect();
        assert_eq!(restored, tokens);
    }
}

#[test]
fn sampled_permutations_are_uniform_at_n3() {
    let mut rng = stream(11, Purpose::SampleOrder, 0);
    let draws = 60_000;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..draws {
        let pi = sample_permutation(&mut rng, 3).unwrap();
        *counts.entry(pi.as_slice().to_vec()).or_default() += 1;
    }
    assert_eq!(counts.len(), 6, "all 6 permutations should appear");
    for (pi, count) in counts {
        let freq = count as f64 / draws as f64;
        assert!(
            (freq - 1.0 / 6.0).abs() < 0.01,
            "permutation {:?} frequency {}",
            pi,
            freq
        );
    }
}

#[test]
fn adjacent_distance_small_cases() {
    let d2 = adjacent_distance_stats(2, DistanceMode::Exact, None).unwrap();
    assert_eq!(d2.mean_adjacent_structural_distance, 1.0);

    let d4 = adjacent_distance_stats(4, DistanceMode::Exact, None).unwrap();
    assert!(
        (d4.mean_adjacent_structural_distance - 5.0 / 3.0).abs() < 1e-12,
        "n=4 exact mean {}",
        d4.mean_adjacent_structural_distance
    );
}

#[test]
fn adjacent_distance_matches_closed_form_and_grows() {
    let mut prev = 0.0;
    for n in 2..=8usize {
        let d = adjacent_distance_stats(n, DistanceMode::Exact, None).unwrap();
        let mean = d.mean_adjacent_structural_distance;
        let closed = (n as f64 + 1.0) / 3.0;
        assert!((mean - closed).abs() < 1e-12, "n={}: {} vs {}", n, mean, closed);
        assert!(mean > prev, "means must increase with n");
        prev = mean;
    }
}

#[test]
fn adjacent_distance_monte_carlo_agrees_at_n64() {
    let mut rng = stream(17, Purpose::SampleOrder, 0);
    let d = adjacent_distance_stats(64, DistanceMode::Sampled(100_000), Some(&mut rng)).unwrap();
    let closed = 65.0 / 3.0;
    let rel = (d.mean_adjacent_structural_distance - closed).abs() / closed;
    assert!(rel < 0.02, "sampled mean off by {}", rel);
}

#[test]
fn exact_mode_rejects_large_n() {
    assert!(adjacent_distance_stats(9, DistanceMode::Exact, None).is_err());
}

proptest! {
    #[test]
    fn sampled_permutations_are_bijections(seed in 0u64..1000, n in 1usize..40) {
        let mut rng = stream(seed, Purpose::SampleOrder, 0);
        let pi = sample_permutation(&mut rng, n).unwrap();
        let mut seen = vec![false; n];
        for t in 0..n {
            let p = pi.slot_to_pos(t);
            prop_assert!(!seen[p]);
            seen[p] = true;
        }
    }

    #[test]
    fn plans_satisfy_position_chaining(seed in 0u64..1000, n in 1usize..40) {
        let mut rng = stream(seed, Purpose::SampleOrder, 1);
        let pi = sample_permutation(&mut rng, n).unwrap();
        let tokens: Vec<u8> = (0..n).map(|i| (i % 27 + 1) as u8).collect();
        let plan = build_order_plan(&tokens, &pi, BOS).unwrap();

        prop_assert_eq!(plan.n_slots(), n + 1);
        // lag positions cover {0,…,n} exactly once
        let mut seen = vec![false; n + 1];
        for &p in &plan.lag_pos {
            prop_assert!(!seen[p]);
            seen[p] = true;
        }
        for t in 0..n {
            prop_assert_eq!(plan.lead_pos[t], plan.lag_pos[t + 1]);
            prop_assert_eq!(plan.target_structural[t], plan.tokens_structural[t + 1]);
        }
        prop_assert_eq!(plan.lead_pos[n], RESERVED_POS);
    }
}
