//! Warm start: sample CoTs from a model, pair each with the reference
//! answer, and fine-tune on the answers only. The CoT is context, so the
//! model learns to answer after its own kind of reasoning.
//!
//!     cargo run --release --example warmstart -- 200

use cotlab::eval::answer_logprob;
use cotlab::policy::{round_params_to_f32, Policy, TinyLm};
use cotlab::protocol::Vocab;
use cotlab::rewards::{RewardSpec, RewardVariant};
use cotlab::tasks::TaskSpec;
use cotlab::trainer::{batch_indices, build_warmstart_dataset, warmstart_sft_step, AdamW, SamplingConfig, TrainConfig};

fn main() -> cotlab::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut model = TinyLm::new(Default::default(), Vocab::builtin(), 0)?;
    let examples = TaskSpec::longtransform(200, 4, 2).generate()?;
    let sampling = SamplingConfig {
        max_new: 16,
        ..Default::default()
    };
    let triples = build_warmstart_dataset(&model, &examples, 2, &sampling, 0)?;
    let mean_lp = |m: &TinyLm| -> cotlab::Result<f64> {
        let mut total = 0.0;
        for t in &triples[..50] {
            total += answer_logprob(m, &t.example, &t.cot)?;
        }
        Ok(total / 50.0)
    };
    println!("{} triples, mean answer log-likelihood {:.3}", triples.len(), mean_lp(&model)?);

    let mut config = TrainConfig::new(RewardSpec::new(RewardVariant::Logprob), steps);
    config.learning_rate = 1e-3;
    let mut optimizer = AdamW::new(config.optimizer, model.num_params());
    for step in 1..=steps {
        let batch: Vec<_> = batch_indices(triples.len(), config.questions_per_step, step, 0)
            .into_iter()
            .map(|i| triples[i].clone())
            .collect();
        warmstart_sft_step(&mut model, &batch, &config, step, &mut optimizer)?;
        round_params_to_f32(model.params_mut());
        if step % (steps / 4).max(1) == 0 {
            println!("step {step:>5}: mean answer log-likelihood {:.3}", mean_lp(&model)?);
        }
    }
    Ok(())
}
