//! Checks the trainer's gradient estimator against exact enumeration on
//! small tabular policies: the expected surrogate gradient must equal the
//! finite-difference gradient of the expected reward, and single-step
//! estimates must average to it.
//!
//!     cargo run --release --example exact_gradient -- 3

use cotlab::policy::Policy;
use cotlab::trainer::GradientOptions;
use cotlab::verify::{lemma_error, random_instance, unbiasedness, PER_ROLLOUT_VARIANTS};

fn main() -> cotlab::Result<()> {
    let instances: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let options = GradientOptions::default();
    for i in 0..instances {
        let inst = random_instance(0, i)?;
        println!(
            "instance {i}: {} parameters, CoT horizon {}, answer length {}",
            inst.policy.num_params(),
            inst.sampling.max_new,
            inst.example.answer().len()
        );
        for v in PER_ROLLOUT_VARIANTS {
            let err = lemma_error(&inst, v, 2, 1e-4, &options)?;
            let stats = unbiasedness(&inst, v, 4, 5_000, 1, &options)?;
            println!(
                "  {:<16} relative error {:.2e}   {} of {} coordinates beyond 3 SE (max z {:.2})",
                v.name(),
                err,
                stats.exceedances,
                stats.coordinates,
                stats.max_z
            );
        }
    }
    Ok(())
}
