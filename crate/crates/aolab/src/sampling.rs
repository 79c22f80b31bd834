//! Generation for both parameterizations.
//!
//! The causal decoder samples a fresh uniform order per sequence and decodes
//! through the KV cache, scattering tokens back to semantic positions at the
//! end. The encoder starts from an all-mask state and unmasks a scheduled
//! number of uniformly chosen positions per denoising step. Draws are
//! restricted to the text alphabet (letters and space) — the reserved BOS and
//! mask ids never appear in output.
//!
//! RNG is split into three streams per sample (order, token draws, unmask
//! schedule) so tests can hold two factors fixed while varying the third.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Token, MASK, TEXT_IDS};
use crate::error::{Error, Result};
use crate::model::{forward_drope_incremental, mdlm_logits, KVCache, ModelConfig, ModelMode, Weights};
use crate::ordering::{sample_permutation, RESERVED_POS};
use crate::rng::{stream, Purpose};
use crate::rope::RotaryTable;
use crate::tensor::softmax_row;

/// Everything one generation stream needs besides the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub seq_len: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Positions unmasked per denoising step (encoder only); sums to
    /// `seq_len`. Defaults to `seq_len/4` near-even steps.
    pub unmask_per_step: Vec<usize>,
}

impl SampleConfig {
    pub fn new(seq_len: usize, temperature: f64, seed: u64) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::invalid("seq_len must be positive"));
        }
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::invalid(format!(
                "temperature must be finite and positive, got {}",
                temperature
            )));
        }
        let steps = (seq_len / 4).max(1);
        Ok(SampleConfig {
            seq_len,
            temperature,
            seed,
            unmask_per_step: even_schedule(seq_len, steps)?,
        })
    }

    /// Replace the denoising schedule with `steps` near-even steps.
    pub fn with_steps(mut self, steps: usize) -> Result<Self> {
        self.unmask_per_step = even_schedule(self.seq_len, steps)?;
        Ok(self)
    }

    /// Replace the denoising schedule with explicit per-step counts.
    pub fn with_schedule(mut self, schedule: Vec<usize>) -> Result<Self> {
        let total: usize = schedule.iter().sum();
        if schedule.is_empty() || total != self.seq_len {
            return Err(Error::invalid(format!(
                "unmask schedule sums to {} but seq_len is {}",
                total, self.seq_len
            )));
        }
        self.unmask_per_step = schedule;
        Ok(self)
    }

    pub fn n_steps(&self) -> usize {
        self.unmask_per_step.len()
    }
}

/// Spread `seq_len` positions over `steps` denoising steps as evenly as
/// possible (the first `seq_len % steps` steps take one extra).
pub fn even_schedule(seq_len: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > seq_len {
        return Err(Error::invalid(format!(
            "need 1..={} denoising steps, got {}",
            seq_len, steps
        )));
    }
    let base = seq_len / steps;
    let extra = seq_len % steps;
    Ok((0..steps)
        .map(|s| if s < extra { base + 1 } else { base })
        .collect())
}

/// Divide logits by the temperature.
pub fn temperature_scale(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::invalid(format!(
            "temperature must be finite and positive, got {}",
            temperature
        )));
    }
    Ok(logits.iter().map(|&l| l / temperature).collect())
}

/// Sample one text token from temperature-scaled logits. Only the text ids
/// participate; reserved ids keep probability zero.
pub fn draw_token(rng: &mut ChaCha8Rng, logits: &[f64], temperature: f64) -> Result<Token> {
    let lo = *TEXT_IDS.start() as usize;
    let hi = *TEXT_IDS.end() as usize;
    if logits.len() <= hi {
        return Err(Error::shape(
            "draw_token",
            format!("logit row of {} misses the text ids", logits.len()),
        ));
    }
    let mut probs = temperature_scale(&logits[lo..=hi], temperature)?;
    softmax_row(&mut probs);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok((lo + j) as Token);
        }
    }
    Ok(hi as Token)
}

/// Decode one sequence with the causal wiring under a fresh uniform order.
///
/// `sample_index` selects independent RNG streams, so concurrent streams with
/// the same seed stay reproducible individually.
pub fn sample_drope(
    weights: &Weights,
    config: &ModelConfig,
    table: &RotaryTable,
    sc: &SampleConfig,
    sample_index: u64,
) -> Result<Vec<Token>> {
    if config.mode != ModelMode::DropeDecoder {
        return Err(Error::invalid("sample_drope needs a drope_decoder config"));
    }
    if sc.seq_len > config.max_seq_len {
        return Err(Error::invalid(format!(
            "seq_len {} exceeds model max {}",
            sc.seq_len, config.max_seq_len
        )));
    }
    let n = sc.seq_len;
    let mut order_rng = stream(sc.seed, Purpose::SampleOrder, sample_index);
    let mut token_rng = stream(sc.seed, Purpose::SampleToken, sample_index);
    let pi = sample_permutation(&mut order_rng, n)?;

    let mut cache = KVCache::new(config, n + 1);
    let mut structural = Vec::with_capacity(n);
    let mut prev_token = crate::data::BOS;
    let mut prev_lag = RESERVED_POS;
    for t in 0..n {
        let lead = pi.slot_to_pos(t) + 1;
        let logits =
            forward_drope_incremental(weights, config, table, &mut cache, prev_token, prev_lag, lead)?;
        let tok = draw_token(&mut token_rng, &logits, sc.temperature)?;
        structural.push(tok);
        prev_token = tok;
        prev_lag = lead;
    }

    let inv = pi.invert();
    let out = (0..n).map(|p| structural[inv.slot_to_pos(p)]).collect();
    Ok(out)
}

/// All intermediate states of one denoising run, kept for inspection; the
/// final entry is the finished sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseTrace {
    pub states: Vec<Vec<Token>>,
}

impl DenoiseTrace {
    pub fn final_tokens(&self) -> &[Token] {
        self.states.last().expect("trace has at least one state")
    }
}

/// Iterative unmasking from a fully masked state, returning every step.
pub fn mdlm_denoise(
    weights: &Weights,
    config: &ModelConfig,
    table: &RotaryTable,
    sc: &SampleConfig,
    sample_index: u64,
) -> Result<DenoiseTrace> {
    if config.mode != ModelMode::MdlmEncoder {
        return Err(Error::invalid("sample_mdlm needs an mdlm_encoder config"));
    }
    if sc.seq_len > config.max_seq_len {
        return Err(Error::invalid(format!(
            "seq_len {} exceeds model max {}",
            sc.seq_len, config.max_seq_len
        )));
    }
    let n = sc.seq_len;
    let total: usize = sc.unmask_per_step.iter().sum();
    if total != n {
        return Err(Error::invalid(format!(
            "unmask schedule sums to {} but seq_len is {}",
            total, n
        )));
    }
    let mut sched_rng = stream(sc.seed, Purpose::SampleSchedule, sample_index);
    let mut token_rng = stream(sc.seed, Purpose::SampleToken, sample_index);

    let positions: Vec<usize> = (1..=n).collect();
    let mut tokens = vec![MASK; n];
    let mut still_masked: Vec<usize> = (0..n).collect();
    let mut states = Vec::with_capacity(sc.n_steps() + 1);
    states.push(tokens.clone());

    for &count in &sc.unmask_per_step {
        let mut chosen = Vec::with_capacity(count);
        for _ in 0..count {
            let j = sched_rng.gen_range(0..still_masked.len());
            chosen.push(still_masked.swap_remove(j));
        }
        chosen.sort_unstable();
        let logits = mdlm_logits(weights, config, table, &tokens, &positions)?;
        for &p in &chosen {
            tokens[p] = draw_token(&mut token_rng, logits.row(p), sc.temperature)?;
        }
        states.push(tokens.clone());
    }
    Ok(DenoiseTrace { states })
}

/// Decode one sequence with the encoder wiring.
pub fn sample_mdlm(
    weights: &Weights,
    config: &ModelConfig,
    table: &RotaryTable,
    sc: &SampleConfig,
    sample_index: u64,
) -> Result<Vec<Token>> {
    Ok(mdlm_denoise(weights, config, table, sc, sample_index)?
        .final_tokens()
        .to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::decode_tokens;

    fn argmax_text(logits: &[f64]) -> Token {
        let lo = *TEXT_IDS.start() as usize;
        let hi = *TEXT_IDS.end() as usize;
        let mut best = lo;
        for i in lo..=hi {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        best as Token
    }

    #[test]
    fn temperature_one_is_identity() {
        let logits = vec![0.3, -1.2, 4.0, 0.0];
        assert_eq!(temperature_scale(&logits, 1.0).unwrap(), logits);
        assert!(temperature_scale(&logits, 0.0).is_err());
        assert!(temperature_scale(&logits, -2.0).is_err());
        assert!(temperature_scale(&logits, f64::NAN).is_err());
    }

    #[test]
    fn halving_temperature_doubles_gaps_keeps_argmax() {
        let logits = vec![0.5, 2.0, -0.3, 1.9];
        let scaled = temperature_scale(&logits, 0.5).unwrap();
        for (i, j) in [(0usize, 1usize), (2, 3), (1, 3)] {
            let gap = logits[i] - logits[j];
            assert!((scaled[i] - scaled[j] - 2.0 * gap).abs() < 1e-12);
        }
        let best = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let best_scaled = scaled
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(best, best_scaled);
    }

    #[test]
    fn huge_temperature_flattens_to_uniform() {
        let mut rng = stream(3, Purpose::SampleToken, 0);
        let logits: Vec<f64> = (0..29).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let lo = *TEXT_IDS.start() as usize;
        let hi = *TEXT_IDS.end() as usize;
        let mut probs = temperature_scale(&logits[lo..=hi], 1e6).unwrap();
        softmax_row(&mut probs);
        let k = probs.len() as f64;
        let kl: f64 = probs.iter().map(|&p| p * (p * k).ln()).sum();
        assert!(kl.abs() < 1e-3, "KL to uniform {}", kl);
    }

    #[test]
    fn tiny_temperature_is_argmax() {
        let mut rng = stream(4, Purpose::SampleToken, 0);
        for case in 0..20 {
            let logits: Vec<f64> = (0..29).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut draw_rng = stream(5, Purpose::SampleToken, case);
            let tok = draw_token(&mut draw_rng, &logits, 1e-9).unwrap();
            assert_eq!(tok, argmax_text(&logits));
        }
    }

    #[test]
    fn draws_never_leave_text_alphabet() {
        let mut rng = stream(6, Purpose::SampleToken, 0);
        let logits = vec![0.0; 29];
        for _ in 0..200 {
            let tok = draw_token(&mut rng, &logits, 2.0).unwrap();
            assert!(TEXT_IDS.contains(&tok));
        }
    }

    #[test]
    fn schedules_cover_seq_len() {
        assert_eq!(even_schedule(16, 4).unwrap(), vec![4, 4, 4, 4]);
        assert_eq!(even_schedule(10, 4).unwrap(), vec![3, 3, 2, 2]);
        assert_eq!(even_schedule(5, 5).unwrap(), vec![1; 5]);
        assert!(even_schedule(4, 5).is_err());
        assert!(even_schedule(4, 0).is_err());
        let sc = SampleConfig::new(16, 1.0, 0).unwrap();
        assert_eq!(sc.n_steps(), 4);
        assert!(sc.clone().with_schedule(vec![8, 8]).is_ok());
        assert!(sc.clone().with_schedule(vec![8, 9]).is_err());
        assert!(SampleConfig::new(16, 0.0, 0).is_err());
    }

    #[test]
    fn one_hot_head_repeats_a_in_both_modes() {
        // Zeroed blocks keep the residual stream at zero; the final norm bias
        // then picks out head row 0, which is set to favour 'a' overwhelmingly.
        for mode in [ModelMode::DropeDecoder, ModelMode::MdlmEncoder] {
            let config = ModelConfig::micro(mode);
            let mut weights = Weights::init(&config, 0).unwrap();
            for (_, t) in weights.tensors_mut() {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
            weights.final_norm_bias.data_mut()[0] = 1.0;
            weights.head.data_mut()[1] = 50.0; // row 0, column 'a'
            let table = RotaryTable::new(config.head_dim(), config.max_seq_len + 1).unwrap();
            let sc = SampleConfig::new(12, 1.0, 9).unwrap();
            let toks = match mode {
                ModelMode::DropeDecoder => sample_drope(&weights, &config, &table, &sc, 0).unwrap(),
                ModelMode::MdlmEncoder => sample_mdlm(&weights, &config, &table, &sc, 0).unwrap(),
            };
            assert_eq!(decode_tokens(&toks), "aaaaaaaaaaaa");
        }
    }

    #[test]
    fn fixed_seed_reproduces_bit_exactly() {
        for mode in [ModelMode::DropeDecoder, ModelMode::MdlmEncoder] {
            let config = ModelConfig::micro(mode);
            let weights = Weights::init(&config, 11).unwrap();
            let table = RotaryTable::new(config.head_dim(), config.max_seq_len + 1).unwrap();
            let sc = SampleConfig::new(16, 0.9, 21).unwrap();
            let run = |idx| match mode {
                ModelMode::DropeDecoder => sample_drope(&weights, &config, &table, &sc, idx).unwrap(),
                ModelMode::MdlmEncoder => sample_mdlm(&weights, &config, &table, &sc, idx).unwrap(),
            };
            assert_eq!(run(0), run(0));
            assert_ne!(run(0), run(1));
        }
    }

    #[test]
    fn denoise_trace_unmasks_monotonically() {
        let config = ModelConfig::micro(ModelMode::MdlmEncoder);
        let weights = Weights::init(&config, 2).unwrap();
        let table = RotaryTable::new(config.head_dim(), config.max_seq_len + 1).unwrap();
        for steps in [1usize, 4, 16] {
            let sc = SampleConfig::new(16, 1.0, 3).unwrap().with_steps(steps).unwrap();
            let trace = mdlm_denoise(&weights, &config, &table, &sc, 0).unwrap();
            assert_eq!(trace.states.len(), steps + 1);
            assert!(trace.states[0].iter().all(|&t| t == MASK));
            for w in trace.states.windows(2) {
                for (a, b) in w[0].iter().zip(w[1].iter()) {
                    if *a != MASK {
                        assert_eq!(a, b);
                    }
                }
            }
            assert!(trace.final_tokens().iter().all(|t| TEXT_IDS.contains(t)));
        }
    }

    #[test]
    fn drope_fills_every_position_once() {
        let config = ModelConfig::micro(ModelMode::DropeDecoder);
        let weights = Weights::init(&config, 13).unwrap();
        let table = RotaryTable::new(config.head_dim(), config.max_seq_len + 1).unwrap();
        for idx in 0..5 {
            let sc = SampleConfig::new(24, 1.2, 17).unwrap();
            let toks = sample_drope(&weights, &config, &table, &sc, idx).unwrap();
            assert_eq!(toks.len(), 24);
            assert!(toks.iter().all(|t| TEXT_IDS.contains(t)));
        }
    }
}
