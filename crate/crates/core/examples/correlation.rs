//! Correlation between CoT length and the reference answer's reward, pooled
//! over questions and averaged within each question. Pooling mixes
//! between-question differences into the estimate; the local average does
//! not.
//!
//!     cargo run --release --example correlation -- 0

use rand::seq::SliceRandom;

use cotlab::eval::{correlation_analysis, CorrelationReward, EvalConfig};
use cotlab::policy::TinyLm;
use cotlab::protocol::Vocab;
use cotlab::rng::Stream;
use cotlab::tasks::TaskSpec;

fn main() -> cotlab::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let model = TinyLm::new(Default::default(), Vocab::builtin(), seed)?;
    let mut questions = TaskSpec::longtransform(500, 11, 4).generate()?;
    questions.shuffle(&mut Stream::new(seed, "questions").rng());
    questions.truncate(40);
    for reward in [CorrelationReward::Logprob, CorrelationReward::Probability] {
        let rep = correlation_analysis(&model, &questions, 16, reward, &EvalConfig::new(32, seed))?;
        println!(
            "{reward:?}: global r {:.3}, mean local r {:.3}, {} of {} questions skipped",
            rep.global.unwrap_or(f64::NAN),
            rep.mean_local,
            rep.skipped,
            rep.questions.len()
        );
    }
    Ok(())
}
