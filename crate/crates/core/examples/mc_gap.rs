//! Monte-Carlo estimates of the CoT-marginal answer log-likelihood are
//! biased low: averaging more CoTs inside the log moves the estimate up
//! toward the true value. Shown exactly on tabular policies and by sampling
//! on an untrained TinyLM.
//!
//!     cargo run --release --example mc_gap

use cotlab::eval::{evaluate, EvalConfig};
use cotlab::policy::TinyLm;
use cotlab::protocol::Vocab;
use cotlab::tasks::TaskSpec;
use cotlab::verify::{mc_ladder, narrow_instance};

fn main() -> cotlab::Result<()> {
    println!("{:>9} {:>10} {:>10} {:>10} {:>10}", "instance", "MC1", "MC4", "MC32", "exact");
    for i in 0..4 {
        let [m1, m4, m32, exact] = mc_ladder(&narrow_instance(5, i)?)?;
        println!("{i:>9} {m1:>10.5} {m4:>10.5} {m32:>10.5} {exact:>10.5}");
    }

    let model = TinyLm::new(Default::default(), Vocab::builtin(), 0)?;
    let examples = TaskSpec::modsum(50, 3, 3, 10).generate()?;
    let mut config = EvalConfig::new(16, 0);
    config.mc = 32;
    let m = evaluate(&model, &examples, &config, 0)?;
    println!(
        "TinyLM on 50 ModSum questions: per-answer MC1 {:.4}, MC32 {:.4}",
        m.per_answer_logprob_mc1,
        m.per_answer_logprob_mc32.unwrap_or(f64::NAN)
    );
    Ok(())
}
