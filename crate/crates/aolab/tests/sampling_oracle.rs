//! Decode-path cross-checks: the KV-cached sampler against a from-scratch
//! recompute that rebuilds the full forward for every step.

use aolab::model::{ModelConfig, ModelMode, Weights};
use aolab::rope::RotaryTable;
use aolab::sampling::{sample_drope, SampleConfig};

mod common;
use common::sample_drope_recompute;

#[test]
fn cached_and_recomputed_tokens_agree_across_models() {
    let mut case = 0u64;
    for &n in &[16usize, 64] {
        for model_seed in 0..25u64 {
            let config = ModelConfig::micro(ModelMode::DropeDecoder);
            let weights = Weights::init(&config, model_seed).unwrap();
            let table = RotaryTable::new(config.head_dim(), config.max_seq_len + 1).unwrap();
            let sc = SampleConfig::new(n, 1.0, 1000 + case).unwrap();
            let cached = sample_drope(&weights, &config, &table, &sc, case).unwrap();
            let recomputed = sample_drope_recompute(&weights, &config, &table, &sc, case);
            assert_eq!(cached, recomputed, "n={} model_seed={}", n, model_seed);
            case += 1;
        }
    }
}

#[test]
fn recompute_agreement_holds_off_unit_temperature() {
    let config = ModelConfig::micro(ModelMode::DropeDecoder);
    let weights = Weights::init(&config, 77).unwrap();
    let table = RotaryTable::new(config.head_dim(), config.max_seq_len + 1).unwrap();
    for (i, &t) in [0.5, 1.7].iter().enumerate() {
        let sc = SampleConfig::new(24, t, 5).unwrap();
        let cached = sample_drope(&weights, &config, &table, &sc, i as u64).unwrap();
        let recomputed = sample_drope_recompute(&weights, &config, &table, &sc, i as u64);
        assert_eq!(cached, recomputed);
    }
}
