//! The five subcommand bodies.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use aolab::data::{decode_tokens, load_corpus, TEXT8_LEN};
use aolab::eval::{
    frontier_csv, frontier_sweep, CoherenceDenominator, SweepConfig, WordList,
};
use aolab::model::{load_model, ModelConfig, ModelMode};
use aolab::sampling::{sample_drope, sample_mdlm, SampleConfig};
use aolab::train::{TrainSinks, Trainer};

use crate::config::{load_run_config, model_table, resolved_toml};
use crate::error::{CliError, CliResult};
use crate::plot::{frontier_series, nll_series, render_chart, ChartSpec, Series};

pub fn prepare_data(path: &Path, allow_small: bool, out: Option<PathBuf>) -> CliResult<()> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {}", path.display(), e)))?;
    if !allow_small && bytes.len() != TEXT8_LEN {
        return Err(CliError::data(format!(
            "{}: expected the full {}-byte corpus, found {} bytes (pass --allow-small for fixtures)",
            path.display(),
            TEXT8_LEN,
            bytes.len()
        )));
    }
    let corpus = load_corpus(path)?;
    let splits = corpus.splits();

    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let checksum = format!("{:x}", hasher.finalize());

    let mut manifest = toml::Table::new();
    manifest.insert(
        "path".into(),
        toml::Value::String(path.to_string_lossy().into_owned()),
    );
    manifest.insert("bytes".into(), toml::Value::Integer(bytes.len() as i64));
    manifest.insert("sha256".into(), toml::Value::String(checksum.clone()));
    let range = |(a, b): (usize, usize)| {
        toml::Value::Array(vec![
            toml::Value::Integer(a as i64),
            toml::Value::Integer(b as i64),
        ])
    };
    let mut split_table = toml::Table::new();
    split_table.insert("train".into(), range(splits.train));
    split_table.insert("valid".into(), range(splits.valid));
    split_table.insert("test".into(), range(splits.test));
    manifest.insert("split".into(), toml::Value::Table(split_table));

    let manifest_path = out.unwrap_or_else(|| {
        let mut s = path.as_os_str().to_owned();
        s.push(".manifest.toml");
        PathBuf::from(s)
    });
    let text = toml::to_string(&manifest)
        .map_err(|e| CliError::Runtime(format!("manifest serialization: {}", e)))?;
    fs::write(&manifest_path, text)?;
    println!(
        "{}: {} bytes, sha256 {}, split {:?}/{:?}/{:?}",
        path.display(),
        bytes.len(),
        &checksum[..12],
        splits.train,
        splits.valid,
        splits.test
    );
    println!("manifest written to {}", manifest_path.display());
    Ok(())
}

/// Newest `stepNNNNNNN.ckpt` in the run directory, if any.
fn latest_checkpoint(dir: &Path) -> CliResult<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Ok(None),
    };
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let step = name
            .strip_prefix("step")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().map_or(true, |(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn train(
    config_path: &Path,
    mode: ModelMode,
    method_tag: &str,
    seq_len: Option<usize>,
    resume: bool,
    stop_after: Option<u64>,
) -> CliResult<()> {
    let run = load_run_config(config_path, mode, seq_len)?;
    let corpus = load_corpus(&run.corpus)?;
    let run_dir = run
        .out_dir
        .join(format!("{}-seq{}", method_tag, run.train.seq_len));
    fs::create_dir_all(&run_dir)?;

    let metrics_path = run_dir.join("metrics.csv");
    if !resume && metrics_path.exists() {
        return Err(CliError::data(format!(
            "{} already holds a run; pass --resume to continue it or pick a fresh out_dir",
            run_dir.display()
        )));
    }

    let mut trainer = match latest_checkpoint(&run_dir)? {
        Some(ckpt) if resume => {
            let t = Trainer::load(&ckpt)?;
            if t.model_config != run.model || t.config != run.train {
                return Err(CliError::data(format!(
                    "{} was written under a different configuration than {}",
                    ckpt.display(),
                    config_path.display()
                )));
            }
            println!("resuming from {} at step {}", ckpt.display(), t.step());
            t
        }
        _ => Trainer::new(run.model, run.train.clone())?,
    };

    fs::write(
        run_dir.join("resolved.toml"),
        resolved_toml(&run, corpus.splits())?,
    )?;

    if trainer.step() >= run.train.total_steps {
        println!(
            "nothing to do: {} is already at step {}",
            run_dir.display(),
            trainer.step()
        );
        return Ok(());
    }

    let sinks = TrainSinks {
        metrics_path: Some(metrics_path),
        checkpoint_dir: Some(run_dir.clone()),
    };
    let report = trainer.run_bounded(&corpus, &sinks, stop_after)?;

    let status = if report.stopped_early {
        "hit the early-stop target"
    } else if trainer.step() < run.train.total_steps {
        "stopped at the step bound"
    } else {
        "finished"
    };
    print!(
        "{}: {} after {} steps (at step {}/{})",
        method_tag,
        status,
        report.steps_run,
        trainer.step(),
        run.train.total_steps
    );
    if let Some(loss) = report.last_train_loss() {
        print!(", train loss {:.4}", loss);
    }
    if let Some(nll) = report.last_val(method_tag) {
        print!(", valid nll {:.4}", nll);
    }
    println!();
    println!("artifacts in {}", run_dir.display());
    Ok(())
}

fn load_checkpoint_model(path: &Path) -> CliResult<(ModelConfig, aolab::model::Weights)> {
    let (config, weights, _meta) = load_model(path)?;
    Ok((config, weights))
}

fn check_seq_len(requested: Option<usize>, config: &ModelConfig) -> CliResult<usize> {
    let n = requested.unwrap_or(config.max_seq_len);
    if n == 0 || n > config.max_seq_len {
        return Err(CliError::data(format!(
            "seq_len {} outside this checkpoint's window 1..={}",
            n, config.max_seq_len
        )));
    }
    Ok(n)
}

#[allow(clippy::too_many_arguments)]
pub fn sample(
    checkpoint: &Path,
    n_samples: usize,
    temperature: f64,
    seq_len: Option<usize>,
    seed: u64,
    steps: Option<usize>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    if n_samples == 0 {
        return Err(CliError::usage("--n-samples must be positive"));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(CliError::usage("--temperature must be a positive number"));
    }
    let (config, weights) = load_checkpoint_model(checkpoint)?;
    let n = check_seq_len(seq_len, &config)?;
    let table = config.rotary_table()?;

    let mut sc = SampleConfig::new(n, temperature, seed)?;
    match (steps, config.mode) {
        (Some(k), ModelMode::MdlmEncoder) => {
            sc = sc
                .with_steps(k)
                .map_err(|e| CliError::usage(e.to_string()))?;
        }
        (Some(_), ModelMode::DropeDecoder) => {
            return Err(CliError::usage(
                "--steps sets the denoising schedule and only applies to mdlm checkpoints",
            ));
        }
        (None, _) => {}
    }

    let mut lines = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let tokens = match config.mode {
            ModelMode::DropeDecoder => sample_drope(&weights, &config, &table, &sc, i as u64)?,
            ModelMode::MdlmEncoder => sample_mdlm(&weights, &config, &table, &sc, i as u64)?,
        };
        lines.push(decode_tokens(&tokens));
    }

    match out {
        Some(path) => {
            fs::write(&path, lines.join("\n") + "\n")?;
            println!("{} samples written to {}", n_samples, path.display());
        }
        None => {
            for line in &lines {
                println!("{}", line);
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn frontier(
    checkpoint: &Path,
    wordlist_path: &Path,
    temperatures: Option<Vec<f64>>,
    n_samples: usize,
    seq_len: Option<usize>,
    seed: u64,
    mdlm_steps: Option<usize>,
    all_words: bool,
    out: &Path,
) -> CliResult<()> {
    if n_samples == 0 {
        return Err(CliError::usage("--n-samples must be positive"));
    }
    if let Some(temps) = &temperatures {
        if temps.is_empty() || temps.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(CliError::usage(
                "--temperatures needs a comma-separated list of positive numbers",
            ));
        }
    }
    let (config, weights) = load_checkpoint_model(checkpoint)?;
    if mdlm_steps.is_some() && config.mode == ModelMode::DropeDecoder {
        return Err(CliError::usage(
            "--mdlm-steps sets the denoising schedule and only applies to mdlm checkpoints",
        ));
    }
    let wordlist = WordList::load(wordlist_path)
        .map_err(|e| CliError::data(format!("wordlist {}: {}", wordlist_path.display(), e)))?;
    if wordlist.is_empty() {
        return Err(CliError::data(format!(
            "wordlist {} contains no words",
            wordlist_path.display()
        )));
    }

    let n = check_seq_len(seq_len, &config)?;
    let mut sweep = SweepConfig::new(n, n_samples, seed);
    if let Some(temps) = temperatures {
        sweep.temperatures = temps;
    }
    sweep.mdlm_steps = mdlm_steps;
    sweep.denominator = if all_words {
        CoherenceDenominator::AllWords
    } else {
        CoherenceDenominator::LongWordsOnly
    };

    let table = config.rotary_table()?;
    let points = frontier_sweep(&weights, &config, &table, &sweep, &wordlist)?;
    fs::write(out, frontier_csv(&points))?;

    // sidecar with everything the sweep resolved to
    let mut meta = toml::Table::new();
    meta.insert(
        "checkpoint".into(),
        toml::Value::String(checkpoint.to_string_lossy().into_owned()),
    );
    meta.insert(
        "wordlist".into(),
        toml::Value::String(wordlist_path.to_string_lossy().into_owned()),
    );
    meta.insert(
        "wordlist_words".into(),
        toml::Value::Integer(wordlist.len() as i64),
    );
    meta.insert("seq_len".into(), toml::Value::Integer(n as i64));
    meta.insert(
        "temperatures".into(),
        toml::Value::Array(
            sweep
                .temperatures
                .iter()
                .map(|&t| toml::Value::Float(t))
                .collect(),
        ),
    );
    meta.insert(
        "n_samples".into(),
        toml::Value::Integer(sweep.n_samples as i64),
    );
    meta.insert("seed".into(), toml::Value::Integer(sweep.seed as i64));
    if let Some(k) = sweep.mdlm_steps {
        meta.insert("mdlm_steps".into(), toml::Value::Integer(k as i64));
    }
    meta.insert(
        "coherence_denominator".into(),
        toml::Value::String(sweep.denominator.tag().into()),
    );
    let mut root = toml::Table::new();
    root.insert("frontier".into(), toml::Value::Table(meta));
    root.insert(
        "model".into(),
        toml::Value::Table(model_table(None, &config)),
    );
    let sidecar = out.with_extension("toml");
    fs::write(
        &sidecar,
        toml::to_string(&root)
            .map_err(|e| CliError::Runtime(format!("sidecar serialization: {}", e)))?,
    )?;

    println!("{} frontier points written to {}", points.len(), out.display());
    Ok(())
}

pub fn plot(kind_is_frontier: bool, csvs: &[PathBuf], out: &Path) -> CliResult<()> {
    let (series, spec): (Vec<Series>, ChartSpec) = if kind_is_frontier {
        (
            frontier_series(csvs)?,
            ChartSpec {
                title: "coherence vs diversity by method".into(),
                x_label: "diversity",
                y_label: "coherence",
            },
        )
    } else {
        (
            nll_series(csvs)?,
            ChartSpec {
                title: "nats per token by step".into(),
                x_label: "step",
                y_label: "nats/token",
            },
        )
    };
    let svg = render_chart(&series, &spec);
    fs::write(out, svg)?;
    println!("{} series plotted to {}", series.len(), out.display());
    Ok(())
}
