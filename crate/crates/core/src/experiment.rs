//! Run configuration and the checkpointed training loop behind `cotlab train`.
//!
//! A run directory holds `config.snapshot.json`, `metrics.jsonl` (one
//! [`LogRecord`] per line), `checkpoints/step-NNNNNN/` every `eval_every`
//! steps and `final/`. Resuming from any checkpoint with the same config
//! reproduces the uninterrupted run exactly: per-step randomness is keyed by
//! step number, parameters are kept at checkpoint precision, and the
//! optimizer moments are saved with the parameters.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, LogRecord, MetricRecord};
use crate::policy::{load_checkpoint, round_params_to_f32, save_checkpoint, Policy, Seeds, TinyLm, TinyLmConfig};
use crate::protocol::{Example, Vocab};
use crate::tasks::{load_jsonl, split, TaskSpec};
use crate::trainer::{batch_indices, rl_train_step, sft_step, AdamW, GradientOptions, StepReport, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub tiny_lm: TinyLmConfig,
    #[serde(default)]
    pub init_seed: u64,
    /// Start from this checkpoint instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Generate(TaskSpec),
    Jsonl(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Group-baseline RL with the configured reward.
    Rl,
    /// Answer-only fine-tuning without a CoT.
    Sft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DataSpec,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_method")]
    pub method: Method,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Validation examples used per evaluation (the first ones of the split).
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
}

fn default_val_fraction() -> f64 {
    0.1
}
fn default_method() -> Method {
    Method::Rl
}
fn default_eval_examples() -> usize {
    100
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

fn config_error(pointer: &str, e: impl std::fmt::Display) -> Error {
    Error::Config {
        pointer: pointer.into(),
        msg: e.to_string(),
    }
}

impl RunConfig {
    /// Parses and validates a config; errors carry a JSON pointer to the
    /// offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            config_error(&pointer, e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| config_error("/train", e))?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(config_error("/val_fraction", "must lie in (0, 1)"));
        }
        if let DataSpec::Generate(spec) = &self.data {
            spec.validate().map_err(|e| config_error("/data/generate", e))?;
        }
        if self.eval.max_new == 0 || self.eval.max_answer == 0 || self.eval.mc == 0 {
            return Err(config_error("/eval", "max_new, max_answer and mc must be positive"));
        }
        if self.eval_examples == 0 {
            return Err(config_error("/eval_examples", "must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Train/validation split of the configured dataset.
    pub fn datasets(&self, vocab: &Vocab) -> Result<(Vec<Example>, Vec<Example>)> {
        let all = match &self.data {
            DataSpec::Generate(spec) => spec.generate()?,
            DataSpec::Jsonl(path) => load_jsonl(path, vocab)?,
        };
        if all.len() < 2 {
            return Err(Error::InvalidArgument("the dataset needs at least two examples".into()));
        }
        split(&all, self.val_fraction, self.split_seed)
    }

    /// The model at step 0.
    pub fn initial_model(&self) -> Result<TinyLm> {
        match &self.model.checkpoint {
            Some(dir) => Ok(load_checkpoint(dir)?.0),
            None => TinyLm::new(self.model.tiny_lm.clone(), Vocab::builtin(), self.model.init_seed),
        }
    }
}

/// Everything a finished run logged, in order.
#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn evals(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Eval(m) => Some(m),
            LogRecord::Train(_) => None,
        })
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepReport> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Train(s) => Some(s),
            LogRecord::Eval(_) => None,
        })
    }

    pub fn last_eval(&self) -> Option<&MetricRecord> {
        self.evals().last()
    }
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:06}"))
}

struct MetricsWriter {
    path: PathBuf,
    file: fs::File,
}

impl MetricsWriter {
    fn open(path: PathBuf, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(MetricsWriter { path, file })
    }

    fn write(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("records serialize") + "\n";
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Options that are not part of the config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    pub gradient: GradientOptions,
}

/// Runs (or resumes) training into `out`.
pub fn run_training(config: &RunConfig, out: &Path, options: &RunOptions) -> Result<RunLog> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let snapshot = out.join("config.snapshot.json");
    fs::write(&snapshot, config.to_json()).map_err(|e| Error::io(&snapshot, e))?;

    let initial = config.initial_model()?;
    let (train, val) = config.datasets(initial.vocab())?;
    let val: Vec<Example> = val.into_iter().take(config.eval_examples).collect();
    let tc = &config.train;
    let seeds = Seeds {
        init: config.model.init_seed,
        run: tc.seed,
    };

    let (mut model, mut optimizer, start) = match &options.resume {
        Some(dir) => {
            let (model, manifest, snap) = load_checkpoint(dir)?;
            if model.num_params() != initial.num_params() {
                return Err(Error::Checkpoint("resume checkpoint does not match the configured model".into()));
            }
            if manifest.step > tc.total_steps {
                return Err(Error::Checkpoint(format!(
                    "checkpoint step {} is past total_steps {}",
                    manifest.step, tc.total_steps
                )));
            }
            let opt = match snap {
                Some(s) => AdamW::from_snapshot(tc.optimizer, s),
                None => AdamW::new(tc.optimizer, model.num_params()),
            };
            (model, opt, manifest.step)
        }
        None => {
            let mut model = initial.clone();
            round_params_to_f32(model.params_mut());
            let opt = AdamW::new(tc.optimizer, model.num_params());
            (model, opt, 0)
        }
    };
    let reference = if tc.reward.kl_coeff > 0.0 { Some(initial) } else { None };

    let mut log = RunLog::default();
    let mut writer = MetricsWriter::open(out.join("metrics.jsonl"), options.resume.is_some())?;
    let mut emit = |rec: LogRecord, log: &mut RunLog| -> Result<()> {
        writer.write(&rec)?;
        log.records.push(rec);
        Ok(())
    };

    if options.resume.is_none() {
        emit(LogRecord::Eval(evaluate(&model, &val, &config.eval, 0)?), &mut log)?;
        save_checkpoint(&checkpoint_dir(out, 0), &model, seeds.clone(), 0, Some(&optimizer.snapshot()))?;
    }
    for step in start + 1..=tc.total_steps {
        let batch: Vec<Example> = batch_indices(train.len(), tc.questions_per_step, step, tc.seed)
            .into_iter()
            .map(|i| train[i].clone())
            .collect();
        let report = match config.method {
            Method::Rl => rl_train_step(
                &mut model,
                reference.as_ref(),
                &batch,
                tc,
                step,
                &mut optimizer,
                &options.gradient,
            )?,
            Method::Sft => sft_step(&mut model, &batch, tc, step, &mut optimizer)?,
        };
        round_params_to_f32(model.params_mut());
        emit(LogRecord::Train(report), &mut log)?;
        if step % tc.eval_every == 0 || step == tc.total_steps {
            emit(LogRecord::Eval(evaluate(&model, &val, &config.eval, step)?), &mut log)?;
            save_checkpoint(&checkpoint_dir(out, step), &model, seeds.clone(), step, Some(&optimizer.snapshot()))?;
        }
    }
    let last = if tc.total_steps > start { tc.total_steps } else { start };
    save_checkpoint(&out.join("final"), &model, seeds, last, Some(&optimizer.snapshot()))?;
    Ok(log)
}

/// Reads a `metrics.jsonl` file.
pub fn read_metrics(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
