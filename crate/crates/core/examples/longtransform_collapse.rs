//! LongTransform answers are long and the CoT carries nothing useful, so the
//! interesting quantities are the answer's log-likelihood and the CoT length.
//! The probability reward is vanishingly small on 12+ token answers and
//! barely moves the model; the log-likelihood reward trains it like SFT.
//!
//!     cargo run --release --example longtransform_collapse -- logprob 400 0
//!
//! Arguments: method (`sft` or a reward variant name), steps, seed, learning
//! rate.

use cotlab::eval::EvalConfig;
use cotlab::experiment::{run_training, DataSpec, Method, ModelSpec, RunConfig, RunOptions};
use cotlab::rewards::{RewardSpec, RewardVariant};
use cotlab::tasks::TaskSpec;
use cotlab::trainer::TrainConfig;

fn main() -> cotlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let method = args.first().map(String::as_str).unwrap_or("logprob");
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let label = method.to_string();

    let (method, variant) = match method {
        "sft" => (Method::Sft, RewardVariant::Logprob),
        name => {
            let v = RewardVariant::ALL
                .into_iter()
                .find(|v| v.name() == name)
                .unwrap_or_else(|| panic!("unknown method `{name}`"));
            (Method::Rl, v)
        }
    };
    let mut train = TrainConfig::new(RewardSpec::new(variant), steps);
    train.seed = seed;
    train.learning_rate = lr;
    train.eval_every = (steps / 6).max(1);
    train.sampling.max_new = 32;
    train.sampling.max_answer = 40;
    let config = RunConfig {
        model: ModelSpec {
            tiny_lm: Default::default(),
            init_seed: seed,
            checkpoint: None,
        },
        data: DataSpec::Generate(TaskSpec::longtransform(2000, 11, 4)),
        val_fraction: 0.1,
        split_seed: 0,
        method,
        train,
        eval: EvalConfig::new(32, 1),
        eval_examples: 100,
    };

    let out = std::env::temp_dir().join(format!("cotlab-longtransform-{label}-{seed}"));
    let log = run_training(&config, &out, &RunOptions::default())?;
    println!("{:>6} {:>12} {:>10} {:>8}", "step", "answer_lp", "perplexity", "cot_len");
    for m in log.evals() {
        println!(
            "{:>6} {:>12.3} {:>10.3} {:>8.2}",
            m.step, m.per_answer_logprob_mc1, m.perplexity, m.mean_cot_length
        );
    }
    println!("run directory: {}", out.display());
    Ok(())
}
