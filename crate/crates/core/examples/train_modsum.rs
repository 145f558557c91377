//! Trains a TinyLM on ModSum with one reward (or plain SFT) and prints the
//! evaluation curve.
//!
//!     cargo run --release --example train_modsum -- logprob 300 0
//!
//! Arguments: method (`sft` or a reward variant name), steps, seed, learning rate, operand count.

use cotlab::eval::EvalConfig;
use cotlab::experiment::{run_training, DataSpec, Method, ModelSpec, RunConfig, RunOptions};
use cotlab::rewards::{RewardSpec, RewardVariant};
use cotlab::tasks::TaskSpec;
use cotlab::trainer::TrainConfig;

fn main() -> cotlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let method = args.first().map(String::as_str).unwrap_or("logprob");
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let operands: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3);
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
    train.eval_every = (steps / 5).max(1);
    train.sampling.max_new = 32;
    let config = RunConfig {
        model: ModelSpec {
            tiny_lm: Default::default(),
            init_seed: seed,
            checkpoint: None,
        },
        data: DataSpec::Generate(TaskSpec::modsum(2000, 7, operands, 10)),
        val_fraction: 0.1,
        split_seed: 0,
        method,
        train,
        eval: EvalConfig::new(32, 1),
        eval_examples: 200,
    };

    let out = std::env::temp_dir().join(format!("cotlab-modsum-{label}-{seed}"));
    let log = run_training(&config, &out, &RunOptions::default())?;
    println!("{:>6} {:>8} {:>8} {:>10} {:>8}", "step", "greedy", "sampled", "perplexity", "cot_len");
    for m in log.evals() {
        println!(
            "{:>6} {:>8.3} {:>8.3} {:>10.3} {:>8.2}",
            m.step, m.greedy_success, m.sampled_success_t1, m.perplexity, m.mean_cot_length
        );
    }
    println!("run directory: {}", out.display());
    Ok(())
}
