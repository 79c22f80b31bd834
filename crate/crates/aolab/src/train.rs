//! Objectives and the training loop for both methods, plus validation NLL.
//!
//! The any-order objective scores each structural slot's prediction of its
//! leading-position token; the masked-denoising objective scores masked
//! positions with the 1/u weighting that makes its expectation match the
//! permutation-averaged any-order loss. Both are reported in nats per token.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{windows_for_epoch, BatchStream, Corpus, Split, Token, BOS, MASK};
use crate::error::{Error, Result};
use crate::model::{
    config_from_table, config_to_table, drope_logits, forward_drope, forward_mdlm, mdlm_logits,
    read_checkpoint, write_checkpoint, Checkpoint, ModelConfig, ModelMode, ModelVars, NamedArray,
    Weights,
};
use crate::ordering::{build_order_plan, sample_permutation, OrderPlan};
use crate::rng::{stream, Purpose};
use crate::rope::RotaryTable;
use crate::tensor::{adam_step, softmax_row, AdamHyper, AdamState, Tape, Tensor, Var};

/// Per-slot loss weighting for the any-order objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AoWeighting {
    /// Every predicted token counts equally: the plain chain-rule NLL.
    Uniform,
    /// Step t of n weighted by 1/(n−t+1), the ELBO-comparable form.
    Positional,
}

impl AoWeighting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(AoWeighting::Uniform),
            "positional" => Ok(AoWeighting::Positional),
            other => Err(Error::invalid(format!("unknown AO weighting '{}'", other))),
        }
    }
}

/// Objective tag used in metric rows and plot legends.
pub fn objective_tag(mode: ModelMode, weighting: AoWeighting) -> &'static str {
    match (mode, weighting) {
        (ModelMode::DropeDecoder, AoWeighting::Uniform) => "drope",
        (ModelMode::DropeDecoder, AoWeighting::Positional) => "drope_pos",
        (ModelMode::MdlmEncoder, _) => "mdlm",
    }
}

/// Slot weights for one plan: `n+1` entries, terminal slot zero.
pub fn ao_loss_weights(n: usize, weighting: AoWeighting) -> Vec<f64> {
    let mut w = vec![0.0; n + 1];
    for (s, slot) in w.iter_mut().enumerate().take(n) {
        *slot = match weighting {
            AoWeighting::Uniform => 1.0,
            AoWeighting::Positional => 1.0 / (n - s) as f64,
        };
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    /// Cosine decay floor as a fraction of `peak_lr`.
    pub lr_floor: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Validation cadence in steps; 0 disables validation.
    pub eval_interval: u64,
    /// Windows per validation estimate.
    pub eval_windows: usize,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    pub ao_weighting: AoWeighting,
    /// Stop once the train loss stays below this for two consecutive steps.
    pub early_stop_below: Option<f64>,
}

impl TrainConfig {
    /// Defaults: 2% linear warmup, cosine decay to 10% of peak, clip 1.0.
    pub fn standard(
        seq_len: usize,
        batch_size: usize,
        total_steps: u64,
        peak_lr: f64,
        seed: u64,
    ) -> Self {
        TrainConfig {
            seq_len,
            batch_size,
            total_steps,
            warmup_steps: (total_steps / 50).max(1),
            peak_lr,
            lr_floor: 0.1,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed,
            eval_interval: 0,
            eval_windows: 50,
            checkpoint_interval: 0,
            ao_weighting: AoWeighting::Uniform,
            early_stop_below: None,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.seq_len == 0 || self.seq_len > model.max_seq_len {
            return Err(Error::invalid(format!(
                "seq_len {} outside 1..={}",
                self.seq_len, model.max_seq_len
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::invalid("batch_size and total_steps must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::invalid("peak_lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::invalid("lr_floor is a fraction of peak in [0, 1]"));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::invalid("weight_decay and clip_norm must be ≥ 0"));
        }
        if self.eval_interval > 0 && self.eval_windows == 0 {
            return Err(Error::invalid("eval_windows must be positive when evaluating"));
        }
        Ok(())
    }
}

/// Learning rate at a 1-based step: linear warmup, then cosine decay to
/// `lr_floor · peak_lr` at the final step.
pub fn lr_at(config: &TrainConfig, step: u64) -> f64 {
    let s = step.min(config.total_steps) as f64;
    let warm = config.warmup_steps.max(1) as f64;
    if s <= warm {
        return config.peak_lr * s / warm;
    }
    let span = (config.total_steps as f64 - warm).max(1.0);
    let progress = ((s - warm) / span).clamp(0.0, 1.0);
    let floor = config.lr_floor * config.peak_lr;
    floor + (config.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One masked-denoising batch: clean windows, per-sequence mask rate u, and
/// the drawn mask indicators. Every sequence has at least one mask.
#[derive(Debug, Clone)]
pub struct MdlmBatch {
    pub clean: Vec<Vec<Token>>,
    pub u: Vec<f64>,
    pub masked: Vec<Vec<bool>>,
}

impl MdlmBatch {
    /// Draw u ~ U(0,1) and Bernoulli(u) masks per sequence, resampling the
    /// pair until at least one position is masked.
    pub fn draw(windows: &[&[Token]], rng: &mut ChaCha8Rng) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::invalid("empty masked-denoising batch"));
        }
        let mut clean = Vec::with_capacity(windows.len());
        let mut us = Vec::with_capacity(windows.len());
        let mut masks = Vec::with_capacity(windows.len());
        for w in windows {
            if w.is_empty() {
                return Err(Error::invalid("cannot mask an empty sequence"));
            }
            let (u, mask) = loop {
                let u: f64 = rng.gen();
                if u == 0.0 {
                    continue;
                }
                let mask: Vec<bool> = (0..w.len()).map(|_| rng.gen::<f64>() < u).collect();
                if mask.iter().any(|&m| m) {
                    break (u, mask);
                }
            };
            clean.push(w.to_vec());
            us.push(u);
            masks.push(mask);
        }
        Ok(MdlmBatch {
            clean,
            u: us,
            masked: masks,
        })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Sequence `i` with masked positions replaced by the MASK id.
    pub fn corrupted(&self, i: usize) -> Vec<Token> {
        self.clean[i]
            .iter()
            .zip(&self.masked[i])
            .map(|(&t, &m)| if m { MASK } else { t })
            .collect()
    }

    /// Per-position loss weights for sequence `i`: 1/u at masks, else 0.
    pub fn loss_weights(&self, i: usize) -> Vec<f64> {
        self.masked[i]
            .iter()
            .map(|&m| if m { 1.0 / self.u[i] } else { 0.0 })
            .collect()
    }
}

/// Batch any-order loss on the tape: mean over plans of the weighted
/// per-slot NLL, normalized per token.
pub fn aoarm_batch_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    table: &RotaryTable,
    plans: &[OrderPlan],
    weighting: AoWeighting,
) -> Result<Var> {
    if plans.is_empty() {
        return Err(Error::invalid("empty plan batch"));
    }
    let mut acc: Option<Var> = None;
    for plan in plans {
        let logits = forward_drope(tape, vars, config, table, plan)?;
        let targets: Vec<usize> = plan.target_structural.iter().map(|&t| t as usize).collect();
        let w = ao_loss_weights(plan.n, weighting);
        let ce = tape.cross_entropy(logits, &targets, &w, false)?;
        let ce = tape.scale(ce, 1.0 / (plan.n * plans.len()) as f64)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    Ok(acc.expect("nonempty batch"))
}

/// Batch masked-denoising loss on the tape: weighted cross entropy at masked
/// positions with weight 1/u, averaged per token over the batch.
pub fn mdlm_batch_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    table: &RotaryTable,
    batch: &MdlmBatch,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty masked-denoising batch"));
    }
    let mut acc: Option<Var> = None;
    for i in 0..batch.len() {
        if !batch.masked[i].iter().any(|&m| m) {
            return Err(Error::invalid(format!(
                "sequence {} has no masked positions",
                i
            )));
        }
        let n = batch.clean[i].len();
        let tokens = batch.corrupted(i);
        let positions: Vec<usize> = (1..=n).collect();
        let logits = forward_mdlm(tape, vars, config, table, &tokens, &positions)?;
        let targets: Vec<usize> = batch.clean[i].iter().map(|&t| t as usize).collect();
        let w = batch.loss_weights(i);
        let ce = tape.cross_entropy(logits, &targets, &w, false)?;
        let ce = tape.scale(ce, 1.0 / (n * batch.len()) as f64)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    Ok(acc.expect("nonempty batch"))
}

fn row_nll(logits: &Tensor, row: usize, target: usize) -> Result<f64> {
    if target >= logits.cols() {
        return Err(Error::IndexOutOfRange {
            what: "target id",
            index: target,
            size: logits.cols(),
        });
    }
    let mut p = logits.row(row).to_vec();
    softmax_row(&mut p);
    Ok(-p[target].ln())
}

/// Value-only any-order loss on precomputed logits; shares the weight
/// definition with the tape path. Used by validation and by exact-oracle
/// tests that substitute tabular conditionals for model output.
pub fn aoarm_loss_from_logits(
    logits: &Tensor,
    plan: &OrderPlan,
    weighting: AoWeighting,
) -> Result<f64> {
    if logits.rows() != plan.n_slots() {
        return Err(Error::shape(
            "aoarm_loss_from_logits",
            format!("{} logit rows for {} slots", logits.rows(), plan.n_slots()),
        ));
    }
    let w = ao_loss_weights(plan.n, weighting);
    let mut total = 0.0;
    for s in 0..plan.n {
        total += w[s] * row_nll(logits, s, plan.target_structural[s] as usize)?;
    }
    Ok(total / plan.n as f64)
}

/// Value-only masked-denoising loss on precomputed logits: (1/u) times the
/// summed NLL at masked positions, per token.
pub fn mdlm_loss_from_logits(
    logits: &Tensor,
    clean: &[Token],
    masked: &[bool],
    u: f64,
) -> Result<f64> {
    let n = clean.len();
    if logits.rows() != n || masked.len() != n {
        return Err(Error::shape(
            "mdlm_loss_from_logits",
            format!(
                "{} logit rows, {} tokens, {} mask flags",
                logits.rows(),
                n,
                masked.len()
            ),
        ));
    }
    if !(u > 0.0 && u <= 1.0) {
        return Err(Error::invalid(format!("mask rate {} outside (0, 1]", u)));
    }
    if !masked.iter().any(|&m| m) {
        return Err(Error::invalid("no masked positions to score"));
    }
    let mut total = 0.0;
    for i in 0..n {
        if masked[i] {
            total += row_nll(logits, i, clean[i] as usize)?;
        }
    }
    Ok(total / u / n as f64)
}

/// Mask rates used by validation: a fixed stratified grid instead of fresh
/// uniform draws, so estimates are comparable across steps and low-variance.
pub const EVAL_U_GRID: [f64; 10] = [0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95];

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub seq_len: usize,
    pub n_windows: usize,
    pub seed: u64,
    pub ao_weighting: AoWeighting,
}

impl EvalConfig {
    pub fn new(seq_len: usize, n_windows: usize, seed: u64) -> Self {
        EvalConfig {
            seq_len,
            n_windows,
            seed,
            ao_weighting: AoWeighting::Uniform,
        }
    }
}

/// Validation NLL in nats per token under fixed evaluation draws.
///
/// Any-order estimates average the plan loss over one fixed permutation per
/// window. Masked-denoising estimates cycle the stratified u-grid, mask
/// exactly round(u·n) positions, and weight by the realized mask fraction —
/// same expectation as the training objective but with the mask-count noise
/// removed.
pub fn validation_nll(
    weights: &Weights,
    config: &ModelConfig,
    table: &RotaryTable,
    val_tokens: &[Token],
    eval: &EvalConfig,
) -> Result<f64> {
    if eval.n_windows == 0 {
        return Err(Error::invalid("n_windows must be positive"));
    }
    let order = windows_for_epoch(val_tokens, eval.seq_len, eval.seed, 0)?;
    let n = eval.seq_len;
    let mut total = 0.0;
    for i in 0..eval.n_windows {
        let w = order[i % order.len()];
        let tokens = &val_tokens[w * n..(w + 1) * n];
        let mut rng = stream(eval.seed, Purpose::EvalDraw, i as u64);
        total += match config.mode {
            ModelMode::DropeDecoder => {
                let pi = sample_permutation(&mut rng, n)?;
                let plan = build_order_plan(tokens, &pi, BOS)?;
                let logits = drope_logits(weights, config, table, &plan)?;
                aoarm_loss_from_logits(&logits, &plan, eval.ao_weighting)?
            }
            ModelMode::MdlmEncoder => {
                let u = EVAL_U_GRID[i % EVAL_U_GRID.len()];
                let m = ((u * n as f64).round() as usize).clamp(1, n);
                let mut idx: Vec<usize> = (0..n).collect();
                for j in 0..m {
                    let k = rng.gen_range(j..n);
                    idx.swap(j, k);
                }
                let mut masked = vec![false; n];
                for &p in &idx[..m] {
                    masked[p] = true;
                }
                let corrupted: Vec<Token> = tokens
                    .iter()
                    .zip(&masked)
                    .map(|(&t, &m)| if m { MASK } else { t })
                    .collect();
                let positions: Vec<usize> = (1..=n).collect();
                let logits = mdlm_logits(weights, config, table, &corrupted, &positions)?;
                mdlm_loss_from_logits(&logits, tokens, &masked, m as f64 / n as f64)?
            }
        };
    }
    Ok(total / eval.n_windows as f64)
}

/// One metric-log row; see [`METRIC_HEADER`] for the CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: &'static str,
    pub objective: &'static str,
    pub seq_len: usize,
    pub nats_per_token: f64,
    pub wallclock_s: f64,
}

pub const METRIC_HEADER: &str = "step,split,objective,seq_len,nats_per_token,wallclock_s";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.3}",
            self.step, self.split, self.objective, self.seq_len, self.nats_per_token,
            self.wallclock_s
        )
    }
}

/// Output destinations for a training run; both optional.
#[derive(Debug, Clone, Default)]
pub struct TrainSinks {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainSinks {
    pub fn none() -> Self {
        TrainSinks::default()
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Global step after the run.
    pub step: u64,
    /// Steps executed by this call (resumes start partway).
    pub steps_run: u64,
    pub rows: Vec<MetricRow>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn curve(&self, split: &str, objective: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.objective == objective)
            .map(|r| (r.step, r.nats_per_token))
            .collect()
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == "train")
            .map(|r| r.nats_per_token)
    }

    pub fn last_val(&self, objective: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == "valid" && r.objective == objective)
            .map(|r| r.nats_per_token)
    }
}

struct CsvSink {
    file: std::fs::File,
}

impl CsvSink {
    fn open(path: &Path) -> Result<CsvSink> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{}", METRIC_HEADER)?;
        }
        Ok(CsvSink { file })
    }

    fn write(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.file, "{}", row.csv())?;
        Ok(())
    }
}

/// Model + optimizer + step counter: everything a resumable run owns.
pub struct Trainer {
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    pub weights: Weights,
    opt: Vec<AdamState>,
    step: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Trainer> {
        config.validate(&model_config)?;
        let weights = Weights::init(&model_config, config.seed)?;
        let opt = weights
            .tensors()
            .iter()
            .map(|(_, t)| AdamState::new(t.numel()))
            .collect();
        Ok(Trainer {
            model_config,
            config,
            weights,
            opt,
            step: 0,
        })
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Write a full trainer checkpoint: model arrays in registry order, then
    /// `adam.m.*` / `adam.v.*` moment arrays, with configs in the header.
    /// The file doubles as a model checkpoint for sampling and evaluation.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = toml::Table::new();
        header.insert(
            "config".into(),
            toml::Value::Table(config_to_table(&self.model_config)),
        );
        let train_table = toml::Table::try_from(&self.config)
            .map_err(|e| Error::CheckpointFormat(format!("train config: {}", e)))?;
        header.insert("train".into(), toml::Value::Table(train_table));
        let mut meta = toml::Table::new();
        meta.insert("step".into(), toml::Value::Integer(self.step as i64));
        header.insert("meta".into(), toml::Value::Table(meta));

        let tensors = self.weights.tensors();
        let mut arrays: Vec<NamedArray> = tensors
            .iter()
            .map(|(name, t)| NamedArray {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        for ((name, t), st) in tensors.iter().zip(&self.opt) {
            arrays.push(NamedArray {
                name: format!("adam.m.{}", name),
                shape: t.shape().to_vec(),
                data: st.m.clone(),
            });
            arrays.push(NamedArray {
                name: format!("adam.v.{}", name),
                shape: t.shape().to_vec(),
                data: st.v.clone(),
            });
        }
        write_checkpoint(path, &Checkpoint { header, arrays })
    }

    /// Restore a trainer saved by [`Trainer::save`].
    pub fn load(path: &Path) -> Result<Trainer> {
        let ckpt = read_checkpoint(path)?;
        let config_table = ckpt
            .header
            .get("config")
            .and_then(|v| v.as_table())
            .ok_or_else(|| Error::CheckpointFormat("missing config table".into()))?;
        let model_config = config_from_table(config_table)?;
        let train_value = ckpt
            .header
            .get("train")
            .cloned()
            .ok_or_else(|| Error::CheckpointFormat("missing train table".into()))?;
        let config: TrainConfig = train_value
            .try_into()
            .map_err(|e| Error::CheckpointFormat(format!("train config: {}", e)))?;
        let step = ckpt
            .header
            .get("meta")
            .and_then(|v| v.as_table())
            .and_then(|m| m.get("step"))
            .and_then(|v| v.as_integer())
            .filter(|&s| s >= 0)
            .ok_or_else(|| Error::CheckpointFormat("missing step counter".into()))?
            as u64;

        let mut weights = Weights::init(&model_config, 0)?;
        let mut opt = Vec::new();
        for (name, tensor) in weights.tensors_mut() {
            let arr = ckpt
                .array(&name)
                .ok_or_else(|| Error::CheckpointFormat(format!("missing array '{}'", name)))?;
            if arr.shape != tensor.shape() {
                return Err(Error::CheckpointFormat(format!(
                    "array '{}' shape {:?} vs expected {:?}",
                    name,
                    arr.shape,
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(&arr.data);
            let m = ckpt
                .array(&format!("adam.m.{}", name))
                .ok_or_else(|| Error::CheckpointFormat(format!("missing moments for '{}'", name)))?;
            let v = ckpt
                .array(&format!("adam.v.{}", name))
                .ok_or_else(|| Error::CheckpointFormat(format!("missing moments for '{}'", name)))?;
            if m.data.len() != tensor.numel() || v.data.len() != tensor.numel() {
                return Err(Error::CheckpointFormat(format!(
                    "moment size mismatch for '{}'",
                    name
                )));
            }
            opt.push(AdamState {
                m: m.data.clone(),
                v: v.data.clone(),
            });
        }
        Ok(Trainer {
            model_config,
            config,
            weights,
            opt,
            step,
        })
    }

    /// Run (or continue) training on the corpus's train split, validating on
    /// its valid split. Resumption is exact: step `k+1` consumes the same
    /// batch and draws as it would have in an uninterrupted run.
    pub fn run(&mut self, corpus: &Corpus, sinks: &TrainSinks) -> Result<TrainReport> {
        self.run_bounded(corpus, sinks, None)
    }

    /// Like [`Trainer::run`], but stop after at most `max_steps` optimizer
    /// steps in this call, writing a checkpoint at the stop point so the run
    /// can be picked up later. Time-boxed jobs use this to hand off cleanly;
    /// the schedule still spans `total_steps`, so the stitched-together run
    /// matches an uninterrupted one bit for bit.
    pub fn run_bounded(
        &mut self,
        corpus: &Corpus,
        sinks: &TrainSinks,
        max_steps: Option<u64>,
    ) -> Result<TrainReport> {
        self.config.validate(&self.model_config)?;
        let table = self.model_config.rotary_table()?;
        let train_tokens = corpus.split_tokens(Split::Train);
        let val_tokens = corpus.split_tokens(Split::Valid);
        let mut batches = BatchStream::new(
            train_tokens,
            self.config.seq_len,
            self.config.batch_size,
            self.config.seed,
        )?;
        batches.fast_forward(self.step * self.config.batch_size as u64)?;

        let mut csv = match &sinks.metrics_path {
            Some(p) => Some(CsvSink::open(p)?),
            None => None,
        };
        if let Some(dir) = &sinks.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
        }

        let train_tag = objective_tag(self.model_config.mode, self.config.ao_weighting);
        let start_step = self.step;
        let stop_at = max_steps.map(|m| start_step.saturating_add(m));
        let t0 = Instant::now();
        let mut rows = Vec::new();
        let mut stopped_early = false;
        let mut below = 0u32;

        let emit = |rows: &mut Vec<MetricRow>, csv: &mut Option<CsvSink>, row: MetricRow| {
            if let Some(sink) = csv {
                sink.write(&row)?;
            }
            rows.push(row);
            Ok::<(), Error>(())
        };

        while self.step < self.config.total_steps {
            let step = self.step + 1;
            let windows = batches.next_batch()?;
            let loss = self.apply_step(step, &windows, &table)?;
            self.step = step;
            emit(
                &mut rows,
                &mut csv,
                MetricRow {
                    step,
                    split: "train",
                    objective: train_tag,
                    seq_len: self.config.seq_len,
                    nats_per_token: loss,
                    wallclock_s: t0.elapsed().as_secs_f64(),
                },
            )?;

            if let Some(th) = self.config.early_stop_below {
                below = if loss < th { below + 1 } else { 0 };
                if below >= 2 {
                    stopped_early = true;
                }
            }
            let last = step == self.config.total_steps || stopped_early;

            if self.config.eval_interval > 0
                && (step % self.config.eval_interval == 0 || last)
            {
                let eval = EvalConfig {
                    seq_len: self.config.seq_len,
                    n_windows: self.config.eval_windows,
                    seed: self.config.seed,
                    ao_weighting: AoWeighting::Uniform,
                };
                let wall = t0.elapsed().as_secs_f64();
                match self.model_config.mode {
                    ModelMode::DropeDecoder => {
                        // both weightings, so either reading of "NLL" is on file
                        for weighting in [AoWeighting::Uniform, AoWeighting::Positional] {
                            let nll = validation_nll(
                                &self.weights,
                                &self.model_config,
                                &table,
                                val_tokens,
                                &EvalConfig {
                                    ao_weighting: weighting,
                                    ..eval
                                },
                            )?;
                            emit(
                                &mut rows,
                                &mut csv,
                                MetricRow {
                                    step,
                                    split: "valid",
                                    objective: objective_tag(self.model_config.mode, weighting),
                                    seq_len: self.config.seq_len,
                                    nats_per_token: nll,
                                    wallclock_s: wall,
                                },
                            )?;
                        }
                    }
                    ModelMode::MdlmEncoder => {
                        let nll = validation_nll(
                            &self.weights,
                            &self.model_config,
                            &table,
                            val_tokens,
                            &eval,
                        )?;
                        emit(
                            &mut rows,
                            &mut csv,
                            MetricRow {
                                step,
                                split: "valid",
                                objective: "mdlm",
                                seq_len: self.config.seq_len,
                                nats_per_token: nll,
                                wallclock_s: wall,
                            },
                        )?;
                    }
                }
            }

            if let Some(dir) = &sinks.checkpoint_dir {
                if self.config.checkpoint_interval > 0
                    && (step % self.config.checkpoint_interval == 0 || last)
                {
                    self.save(&dir.join(format!("step{:07}.ckpt", step)))?;
                }
            }

            if stopped_early {
                break;
            }
            if let Some(limit) = stop_at {
                if self.step >= limit && self.step < self.config.total_steps {
                    if let Some(dir) = &sinks.checkpoint_dir {
                        self.save(&dir.join(format!("step{:07}.ckpt", self.step)))?;
                    }
                    break;
                }
            }
        }

        Ok(TrainReport {
            step: self.step,
            steps_run: self.step - start_step,
            rows,
            stopped_early,
        })
    }

    /// One optimizer step over a batch of windows. Batch draws come from a
    /// per-step stream so resumed runs replay them exactly.
    fn apply_step(&mut self, step: u64, windows: &[&[Token]], table: &RotaryTable) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ModelVars::load(&mut tape, &self.weights, true);
        let mut rng = stream(self.config.seed, Purpose::TrainDraw, step);
        let loss_var: Var = match self.model_config.mode {
            ModelMode::DropeDecoder => {
                let mut plans = Vec::with_capacity(windows.len());
                for w in windows {
                    let pi = sample_permutation(&mut rng, w.len())?;
                    plans.push(build_order_plan(w, &pi, BOS)?);
                }
                aoarm_batch_loss(
                    &mut tape,
                    &vars,
                    &self.model_config,
                    table,
                    &plans,
                    self.config.ao_weighting,
                )?
            }
            ModelMode::MdlmEncoder => {
                let batch = MdlmBatch::draw(windows, &mut rng)?;
                mdlm_batch_loss(&mut tape, &vars, &self.model_config, table, &batch)?
            }
        };
        let loss = tape.value(loss_var).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss", step });
        }
        let grads = tape.backward(loss_var, 1.0)?;
        let mut gvecs = vars.collect_grads(&tape, &grads);

        if self.config.clip_norm > 0.0 {
            let norm = gvecs
                .iter()
                .flat_map(|g| g.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > self.config.clip_norm {
                let s = self.config.clip_norm / norm;
                for g in &mut gvecs {
                    for x in g.iter_mut() {
                        *x *= s;
                    }
                }
            }
        }

        let lr = lr_at(&self.config, step);
        let hyper = AdamHyper {
            weight_decay: self.config.weight_decay,
            ..AdamHyper::default()
        };
        for (((_, t), g), st) in self
            .weights
            .tensors_mut()
            .into_iter()
            .zip(&gvecs)
            .zip(self.opt.iter_mut())
        {
            adam_step(t.data_mut(), g, st, &hyper, lr, step)?;
        }
        Ok(loss)
    }
}
