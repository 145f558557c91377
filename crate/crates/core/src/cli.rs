//! The `cotlab` command line. Exit codes: 0 ok, 1 runtime or data failure,
//! 2 usage or config error, 3 numerical abort.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::eval::{correlation_analysis, evaluate, CorrelationReward, EvalConfig, LogRecord};
use crate::experiment::{read_metrics, run_training, RunConfig, RunOptions};
use crate::policy::{load_checkpoint, save_checkpoint, Policy};
use crate::rewards::RewardSpec;
use crate::rewards::RewardVariant;
use crate::rng::Stream;
use crate::tasks::{load_jsonl, write_jsonl, write_triples_jsonl, TaskSpec};
use crate::trainer::{build_warmstart_dataset, warmstart_sft_step, AdamW, GradientOptions, SamplingConfig, TrainConfig};
use crate::verify::{run_suite, Suite};

/// Environment hook that deliberately breaks the gradient estimator, so the
/// verification suite can be shown to catch it.
pub const FAULT_ENV: &str = "COTLAB_INJECT_FAULT";
pub const THREADS_ENV: &str = "COTLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cotlab", version, about = "Chain-of-thought RL with likelihood rewards, at desk scale")]
pub struct Cli {
    /// Worker threads (default 1, which keeps runs bitwise reproducible).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as JSONL.
    GenData(GenDataArgs),
    /// Train from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print one metric record.
    Eval(EvalArgs),
    /// Global and per-question correlation of CoT length with reward.
    Correlate(CorrelateArgs),
    /// Build a CoT dataset from a checkpoint and fine-tune on it.
    Warmstart(WarmstartArgs),
    /// Check the gradient estimator and bounds against exact oracles.
    Verify(VerifyArgs),
    /// Convert metrics.jsonl to CSV.
    ExportCsv(ExportCsvArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskKind {
    Modsum,
    Longtransform,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10, conflicts_with = "multiplier")]
    pub modulus: u32,
    #[arg(long, default_value_t = 3, conflicts_with = "multiplier")]
    pub operands: usize,
    #[arg(long, default_value_t = 4)]
    pub multiplier: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides both the initialization and the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// CoT samples per example; 32 or more also fills the MC-32 fields.
    #[arg(long, default_value_t = 1)]
    pub mc: usize,
    /// Evaluate only the first N examples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    #[arg(long, default_value_t = 40)]
    pub max_answer: usize,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub questions: usize,
    #[arg(long)]
    pub samples: usize,
    #[arg(long, value_enum)]
    pub reward: CorrelationReward,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
}

#[derive(Debug, Args)]
pub struct WarmstartArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// CoTs sampled per prompt.
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RecordKind {
    Eval,
    Train,
}

#[derive(Debug, Args)]
pub struct ExportCsvArgs {
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = RecordKind::Eval)]
    pub kind: RecordKind,
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        Error::NonFiniteLoss { .. } => 3,
        _ => 1,
    }
}

/// Parses `args` and runs the command; usage errors exit with 2.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.unwrap_or(1).max(1);
    // a second call in the same process keeps the existing pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Correlate(a) => correlate(a),
        Command::Warmstart(a) => warmstart(a),
        Command::Verify(a) => verify(a),
        Command::ExportCsv(a) => export_csv(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = match a.task {
        TaskKind::Modsum => TaskSpec::modsum(a.n, a.seed, a.operands, a.modulus),
        TaskKind::Longtransform => TaskSpec::longtransform(a.n, a.seed, a.multiplier),
    };
    let examples = spec.generate()?;
    write_jsonl(&a.out, &examples, &crate::protocol::Vocab::builtin())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        config.model.init_seed = seed;
        config.train.seed = seed;
    }
    let options = RunOptions {
        resume: a.resume,
        gradient: GradientOptions::default(),
    };
    let log = run_training(&config, &a.out, &options)?;
    if let Some(last) = log.last_eval() {
        eprintln!(
            "step {}: greedy success {:.3}, perplexity {:.3}, mean CoT length {:.2}",
            last.step, last.greedy_success, last.perplexity, last.mean_cot_length
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.mc == 0 || a.max_new == 0 || a.max_answer == 0 {
        return Err(Error::InvalidArgument("--mc, --max-new and --max-answer must be positive".into()));
    }
    let (model, manifest, _) = load_checkpoint(&a.ckpt)?;
    let mut examples = load_jsonl(&a.data, model.vocab())?;
    if let Some(n) = a.samples {
        examples.truncate(n);
    }
    let config = EvalConfig {
        max_new: a.max_new,
        max_answer: a.max_answer,
        mc: a.mc,
        seed: a.seed,
    };
    let record = evaluate(&model, &examples, &config, manifest.step)?;
    let line = serde_json::to_string(&LogRecord::Eval(record)).expect("records serialize");
    let path = a.ckpt.join("metrics.jsonl");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    println!("{line}");
    Ok(())
}

fn correlate(a: CorrelateArgs) -> Result<()> {
    let (model, _, _) = load_checkpoint(&a.ckpt)?;
    let mut examples = load_jsonl(&a.data, model.vocab())?;
    examples.shuffle(&mut Stream::new(a.seed, "correlate-questions").rng());
    examples.truncate(a.questions);
    let config = EvalConfig::new(a.max_new, a.seed);
    let report = correlation_analysis(&model, &examples, a.samples, a.reward, &config)?;
    write_json(&a.out, &report)?;
    eprintln!(
        "global r {}, mean local r {:.4}, {} of {} questions skipped",
        report.global.map_or("undefined".into(), |g| format!("{g:.4}")),
        report.mean_local,
        report.skipped,
        report.questions.len()
    );
    Ok(())
}

fn warmstart(a: WarmstartArgs) -> Result<()> {
    if a.k == 0 || a.max_new == 0 {
        return Err(Error::InvalidArgument("--k and --max-new must be positive".into()));
    }
    let (mut model, manifest, _) = load_checkpoint(&a.ckpt)?;
    let examples = load_jsonl(&a.data, model.vocab())?;
    let sampling = SamplingConfig {
        max_new: a.max_new,
        ..SamplingConfig::default()
    };
    let triples = build_warmstart_dataset(&model, &examples, a.k, &sampling, a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_triples_jsonl(&a.out.join("cots.jsonl"), &triples, model.vocab())?;

    let mut config = TrainConfig::new(RewardSpec::new(RewardVariant::Logprob), a.steps);
    config.learning_rate = a.lr;
    config.seed = a.seed;
    config.warmup_steps = config.warmup_steps.min(a.steps);
    let mut optimizer = AdamW::new(config.optimizer, model.num_params());
    let metrics = a.out.join("metrics.jsonl");
    let mut lines = String::new();
    for step in 1..=a.steps {
        let batch: Vec<_> = crate::trainer::batch_indices(triples.len(), config.questions_per_step, step, a.seed)
            .into_iter()
            .map(|i| triples[i].clone())
            .collect();
        let report = warmstart_sft_step(&mut model, &batch, &config, step, &mut optimizer)?;
        crate::policy::round_params_to_f32(model.params_mut());
        lines.push_str(&serde_json::to_string(&LogRecord::Train(report)).expect("records serialize"));
        lines.push('\n');
    }
    fs::write(&metrics, lines).map_err(|e| Error::io(&metrics, e))?;
    save_checkpoint(
        &a.out.join("checkpoint"),
        &model,
        manifest.seeds,
        a.steps,
        (a.steps > 0).then(|| optimizer.snapshot()).as_ref(),
    )
}

fn verify(a: VerifyArgs) -> Result<()> {
    let options = match std::env::var(FAULT_ENV).as_deref() {
        Ok("flip-advantage") => GradientOptions {
            flip_advantage: true,
            ..Default::default()
        },
        _ => GradientOptions::default(),
    };
    let report = run_suite(a.suite, a.seed, &options)?;
    eprint!("{}", report.human());
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    let failed = report.failures().next().map(|c| c.name.clone());
    match failed {
        None => Ok(()),
        Some(name) => Err(Error::VerificationFailed(name)),
    }
}

fn export_csv(a: ExportCsvArgs) -> Result<()> {
    let records = read_metrics(&a.metrics)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| csv_error(&a.out, e))?;
    let mut header_written = false;
    for rec in &records {
        match (rec, a.kind) {
            (LogRecord::Eval(m), RecordKind::Eval) => w.serialize(m),
            (LogRecord::Train(s), RecordKind::Train) => w.serialize(s),
            _ => continue,
        }
        .map_err(|e| csv_error(&a.out, e))?;
        header_written = true;
    }
    if !header_written {
        return Err(Error::InvalidArgument(format!(
            "{} holds no {:?} records",
            a.metrics.display(),
            a.kind
        )));
    }
    w.flush().map_err(|e| Error::io(&a.out, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
