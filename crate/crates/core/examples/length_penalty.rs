//! Length-penalty calibration. An unpenalized log-likelihood run measures
//! how much reward it gained while the CoT shortened over its first 40
//! steps; the penalty rate is that ratio, with the step-0 CoT length as the
//! threshold. When the CoT did not shorten there is nothing to compensate
//! and calibration reports it.
//!
//!     cargo run --release --example length_penalty -- 300 0 [rate]

use cotlab::eval::EvalConfig;
use cotlab::experiment::{run_training, DataSpec, Method, ModelSpec, RunConfig, RunLog, RunOptions};
use cotlab::rewards::{calibrate_length_rate, LengthPenalty, RewardSpec, RewardVariant};
use cotlab::tasks::TaskSpec;
use cotlab::trainer::TrainConfig;

fn config(steps: usize, seed: u64, penalty: Option<LengthPenalty>) -> RunConfig {
    let mut train = TrainConfig::new(RewardSpec::new(RewardVariant::Logprob), steps);
    train.seed = seed;
    train.learning_rate = 1e-3;
    train.eval_every = (steps / 4).max(1);
    train.sampling.max_new = 32;
    train.reward.length_penalty = penalty;
    RunConfig {
        model: ModelSpec {
            tiny_lm: Default::default(),
            init_seed: seed,
            checkpoint: None,
        },
        data: DataSpec::Generate(TaskSpec::longtransform(2000, 11, 4)),
        val_fraction: 0.1,
        split_seed: 0,
        method: Method::Rl,
        train,
        eval: EvalConfig::new(32, seed),
        eval_examples: 50,
    }
}

fn window(log: &RunLog, from: usize) -> (f64, f64) {
    let s: Vec<_> = log.steps().filter(|s| s.step >= from && s.step < from + 5).collect();
    let n = s.len() as f64;
    (
        s.iter().map(|r| r.mean_reward).sum::<f64>() / n,
        s.iter().map(|r| r.mean_cot_length).sum::<f64>() / n,
    )
}

fn show(label: &str, log: &RunLog) {
    for m in log.evals() {
        println!("{label:>12} step {:>5}: CoT length {:>6.2}, answer lp {:.3}", m.step, m.mean_cot_length, m.per_answer_logprob_mc1);
    }
}

fn main() -> cotlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let manual: Option<f64> = args.get(2).and_then(|s| s.parse().ok());
    let tmp = std::env::temp_dir();

    let base = run_training(&config(steps.max(45), seed, None), &tmp.join(format!("cotlab-lp-base-{seed}")), &RunOptions::default())?;
    show("unpenalized", &base);
    let l0 = base.evals().next().map(|m| m.mean_cot_length).unwrap_or(0.0);
    let ((r0, len0), (r40, len40)) = (window(&base, 1), window(&base, 41));
    let rate = match (manual, calibrate_length_rate(r40 - r0, len0 - len40)) {
        (Some(r), _) => r,
        (None, Ok(r)) => r.max(0.0),
        (None, Err(e)) => {
            println!("calibration failed: {e} (CoT length {len0:.2} -> {len40:.2}); pass a rate to override");
            return Ok(());
        }
    };
    println!("penalty rate {rate:.4} per token below {l0:.2}");
    let penalty = LengthPenalty { rate, threshold: l0 };
    let penalized = run_training(&config(steps, seed, Some(penalty)), &tmp.join(format!("cotlab-lp-pen-{seed}")), &RunOptions::default())?;
    show("penalized", &penalized);
    Ok(())
}
