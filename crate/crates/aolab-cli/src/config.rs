//! The run configuration file and its fully-resolved form.
//!
//! An experiment is described once in TOML: where the corpus lives, which
//! model preset to build, how to train it, and how sampling and the
//! evaluation grid are set up. Only a handful of keys are required; the rest
//! fall back to documented defaults. Every training run writes the resolved
//! result next to its outputs as `resolved.toml`, which is itself a valid
//! run config, so any run can be reproduced bit-for-bit from its artifacts.
//!
//! The method is deliberately *not* part of the file: `--method` selects it,
//! and the same config drives both methods. The `mode` and `split` keys that
//! appear in resolved files are informational and ignored on input.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use aolab::data::CorpusSplits;
use aolab::eval::default_temperature_grid;
use aolab::model::{ModelConfig, ModelMode};
use aolab::train::{AoWeighting, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Micro,
    Sanity,
    Desk,
    #[serde(rename = "full_8m")]
    Full8m,
}

impl Preset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Micro => "micro",
            Preset::Sanity => "sanity",
            Preset::Desk => "desk",
            Preset::Full8m => "full_8m",
        }
    }

    fn build(&self, mode: ModelMode, seq_len: usize) -> ModelConfig {
        match self {
            Preset::Micro => ModelConfig::micro(mode),
            Preset::Sanity => ModelConfig::sanity(mode),
            Preset::Desk => ModelConfig::desk(mode, seq_len),
            Preset::Full8m => ModelConfig::full_8m(mode, seq_len),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    seed: Option<u64>,
    paths: PathsSection,
    model: ModelSection,
    train: TrainSection,
    #[serde(default)]
    sample: SampleSection,
    #[serde(default)]
    eval: EvalSection,
    // present in resolved files; recomputed from the corpus on input
    #[serde(rename = "split")]
    _split: Option<SplitSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathsSection {
    corpus: PathBuf,
    wordlist: Option<PathBuf>,
    out_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    preset: Preset,
    // informational in resolved files; `--method` decides the mode
    #[serde(rename = "mode")]
    _mode: Option<String>,
    n_layers: Option<usize>,
    d_model: Option<usize>,
    n_heads: Option<usize>,
    d_ff: Option<usize>,
    max_seq_len: Option<usize>,
    vocab_size: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    seq_len: usize,
    batch_size: usize,
    total_steps: u64,
    peak_lr: f64,
    warmup_steps: Option<u64>,
    lr_floor: Option<f64>,
    weight_decay: Option<f64>,
    clip_norm: Option<f64>,
    seed: Option<u64>,
    eval_interval: Option<u64>,
    eval_windows: Option<usize>,
    checkpoint_interval: Option<u64>,
    ao_weighting: Option<AoWeighting>,
    early_stop_below: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleSection {
    temperature: Option<f64>,
    n_samples: Option<usize>,
    steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSection {
    temperatures: Option<Vec<f64>>,
    n_samples: Option<usize>,
    all_words: Option<bool>,
}

#[derive(Debug, Deserialize)]
struct SplitSection {
    #[allow(dead_code)]
    train: [usize; 2],
    #[allow(dead_code)]
    valid: [usize; 2],
    #[allow(dead_code)]
    test: [usize; 2],
}

/// Everything a run needs, with every default filled in.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub seed: u64,
    pub corpus: PathBuf,
    pub wordlist: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleSettings,
    pub eval: EvalSettings,
}

#[derive(Debug, Clone)]
pub struct SampleSettings {
    pub temperature: f64,
    pub n_samples: usize,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub temperatures: Vec<f64>,
    pub n_samples: usize,
    pub all_words: bool,
}

/// Parse a run config and resolve it for one method. `seq_len_override`
/// comes from `--seq-len` and replaces the file's `train.seq_len`.
pub fn load_run_config(
    path: &Path,
    mode: ModelMode,
    seq_len_override: Option<usize>,
) -> CliResult<ResolvedRun> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read config {}: {}", path.display(), e)))?;
    let file: RunConfigFile = toml::from_str(&text)
        .map_err(|e| CliError::data(format!("config {}: {}", path.display(), e)))?;

    let seed = file.seed.unwrap_or(0);
    let seq_len = seq_len_override.unwrap_or(file.train.seq_len);

    let mut model = file.model.preset.build(mode, seq_len);
    if let Some(v) = file.model.n_layers {
        model.n_layers = v;
    }
    if let Some(v) = file.model.d_model {
        model.d_model = v;
    }
    if let Some(v) = file.model.n_heads {
        model.n_heads = v;
    }
    if let Some(v) = file.model.d_ff {
        model.d_ff = v;
    }
    match file.model.max_seq_len {
        Some(v) => model.max_seq_len = v,
        // presets with a fixed window grow to fit the requested sequences
        None => model.max_seq_len = model.max_seq_len.max(seq_len),
    }
    if let Some(v) = file.model.vocab_size {
        if v != model.vocab_size {
            return Err(CliError::data(format!(
                "vocab_size {} does not match the {}-symbol alphabet",
                v, model.vocab_size
            )));
        }
    }
    model
        .validate()
        .map_err(|e| CliError::data(format!("model config: {}", e)))?;

    let t = &file.train;
    let total_steps = t.total_steps;
    let train = TrainConfig {
        seq_len,
        batch_size: t.batch_size,
        total_steps,
        warmup_steps: t.warmup_steps.unwrap_or((total_steps / 50).max(1)),
        peak_lr: t.peak_lr,
        lr_floor: t.lr_floor.unwrap_or(0.1),
        weight_decay: t.weight_decay.unwrap_or(0.0),
        clip_norm: t.clip_norm.unwrap_or(1.0),
        seed: t.seed.unwrap_or(seed),
        eval_interval: t.eval_interval.unwrap_or((total_steps / 10).max(1)),
        eval_windows: t.eval_windows.unwrap_or(50),
        checkpoint_interval: t.checkpoint_interval.unwrap_or((total_steps / 4).max(1)),
        ao_weighting: t.ao_weighting.unwrap_or(AoWeighting::Uniform),
        early_stop_below: t.early_stop_below,
    };
    train
        .validate(&model)
        .map_err(|e| CliError::data(format!("train config: {}", e)))?;

    let sample = SampleSettings {
        temperature: file.sample.temperature.unwrap_or(1.0),
        n_samples: file.sample.n_samples.unwrap_or(4),
        steps: file.sample.steps,
    };
    if !(sample.temperature.is_finite() && sample.temperature > 0.0) || sample.n_samples == 0 {
        return Err(CliError::data(
            "sample.temperature must be positive and sample.n_samples nonzero",
        ));
    }

    let eval = EvalSettings {
        temperatures: file
            .eval
            .temperatures
            .unwrap_or_else(default_temperature_grid),
        n_samples: file.eval.n_samples.unwrap_or(8),
        all_words: file.eval.all_words.unwrap_or(false),
    };
    if eval.temperatures.is_empty()
        || eval
            .temperatures
            .iter()
            .any(|t| !(t.is_finite() && *t > 0.0))
        || eval.n_samples == 0
    {
        return Err(CliError::data(
            "eval.temperatures must be positive and eval.n_samples nonzero",
        ));
    }

    Ok(ResolvedRun {
        seed,
        corpus: file.paths.corpus,
        wordlist: file.paths.wordlist,
        out_dir: file.paths.out_dir,
        preset: file.model.preset,
        model,
        train,
        sample,
        eval,
    })
}

pub fn model_table(preset: Option<Preset>, model: &ModelConfig) -> toml::Table {
    let mut m = toml::Table::new();
    if let Some(p) = preset {
        m.insert("preset".into(), toml::Value::String(p.as_str().into()));
    }
    m.insert("mode".into(), toml::Value::String(model.mode.as_str().into()));
    m.insert("n_layers".into(), toml::Value::Integer(model.n_layers as i64));
    m.insert("d_model".into(), toml::Value::Integer(model.d_model as i64));
    m.insert("n_heads".into(), toml::Value::Integer(model.n_heads as i64));
    m.insert("d_ff".into(), toml::Value::Integer(model.d_ff as i64));
    m.insert(
        "vocab_size".into(),
        toml::Value::Integer(model.vocab_size as i64),
    );
    m.insert(
        "max_seq_len".into(),
        toml::Value::Integer(model.max_seq_len as i64),
    );
    m
}

fn split_table(splits: CorpusSplits) -> toml::Table {
    let range = |(a, b): (usize, usize)| {
        toml::Value::Array(vec![
            toml::Value::Integer(a as i64),
            toml::Value::Integer(b as i64),
        ])
    };
    let mut s = toml::Table::new();
    s.insert("train".into(), range(splits.train));
    s.insert("valid".into(), range(splits.valid));
    s.insert("test".into(), range(splits.test));
    s
}

/// Render the fully-resolved config. The output parses back through
/// [`load_run_config`] to the identical run.
pub fn resolved_toml(run: &ResolvedRun, splits: CorpusSplits) -> CliResult<String> {
    let mut root = toml::Table::new();
    root.insert("seed".into(), toml::Value::Integer(run.seed as i64));

    let mut paths = toml::Table::new();
    paths.insert(
        "corpus".into(),
        toml::Value::String(run.corpus.to_string_lossy().into_owned()),
    );
    if let Some(w) = &run.wordlist {
        paths.insert(
            "wordlist".into(),
            toml::Value::String(w.to_string_lossy().into_owned()),
        );
    }
    paths.insert(
        "out_dir".into(),
        toml::Value::String(run.out_dir.to_string_lossy().into_owned()),
    );
    root.insert("paths".into(), toml::Value::Table(paths));

    root.insert(
        "model".into(),
        toml::Value::Table(model_table(Some(run.preset), &run.model)),
    );

    let train = toml::Table::try_from(&run.train)
        .map_err(|e| CliError::Runtime(format!("train config serialization: {}", e)))?;
    root.insert("train".into(), toml::Value::Table(train));

    let mut sample = toml::Table::new();
    sample.insert(
        "temperature".into(),
        toml::Value::Float(run.sample.temperature),
    );
    sample.insert(
        "n_samples".into(),
        toml::Value::Integer(run.sample.n_samples as i64),
    );
    if let Some(s) = run.sample.steps {
        sample.insert("steps".into(), toml::Value::Integer(s as i64));
    }
    root.insert("sample".into(), toml::Value::Table(sample));

    let mut eval = toml::Table::new();
    eval.insert(
        "temperatures".into(),
        toml::Value::Array(
            run.eval
                .temperatures
                .iter()
                .map(|&t| toml::Value::Float(t))
                .collect(),
        ),
    );
    eval.insert(
        "n_samples".into(),
        toml::Value::Integer(run.eval.n_samples as i64),
    );
    eval.insert("all_words".into(), toml::Value::Boolean(run.eval.all_words));
    root.insert("eval".into(), toml::Value::Table(eval));

    root.insert("split".into(), toml::Value::Table(split_table(splits)));

    toml::to_string(&root)
        .map_err(|e| CliError::Runtime(format!("resolved config serialization: {}", e)))
}
