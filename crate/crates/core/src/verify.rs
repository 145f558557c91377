//! Oracle checks behind `cotlab verify`: the trainer's gradient against
//! exact enumeration on small tabular policies, plus the Jensen and
//! Monte-Carlo bounds.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::oracle::{
    exact_marginal_logprob, expected_logprob_mc, expected_objective, expected_reward_gradient,
    expected_surrogate_gradient, objective_fd_gradient, SPACE_LIMIT,
};
use crate::policy::{GradBuffer, TabularLayout, TabularPolicy};
use crate::protocol::{render_prompt, Example, Vocab};
use crate::rewards::{jepo_group_reward, logprob_reward, AnswerScore, RewardSpec, RewardVariant};
use crate::rng::Stream;
use crate::trainer::{accumulate_group_gradient, sample_rollout, GradientOptions, SamplingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lemma,
    Unbiased,
    Jensen,
    Mc,
    All,
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

/// Variants whose expected reward is a per-rollout expectation.
pub const PER_ROLLOUT_VARIANTS: [RewardVariant; 5] = [
    RewardVariant::Logprob,
    RewardVariant::AvgLogprob,
    RewardVariant::Probability,
    RewardVariant::AvgProbability,
    RewardVariant::BinaryVerifier,
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    /// The measured quantity (an error, a count, a gap).
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl Report {
    fn new(seed: u64, checks: Vec<Check>) -> Self {
        Report {
            seed,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn human(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<9} {:<48} value {:.3e} (tolerance {:.1e})\n",
                if c.passed { "PASS" } else { "FAIL" },
                format!("{:?}", c.suite).to_lowercase(),
                c.name,
                c.value,
                c.tolerance
            ));
        }
        let failed = self.failures().count();
        out.push_str(&format!("{} checks, {} failed\n", self.checks.len(), failed));
        out
    }
}

/// A small policy with an enumerable rollout space.
#[derive(Clone, Debug)]
pub struct Instance {
    pub policy: TabularPolicy,
    pub example: Example,
    pub sampling: SamplingConfig,
}

/// Random instance over four ordinary tokens: two CoT tokens, two answer
/// tokens, CoT horizon 1 to 3, answers of length 1 or 2.
pub fn random_instance(seed: u64, index: u64) -> Result<Instance> {
    build_instance(seed, index, 2)
}

/// Like [`random_instance`] but with a single CoT token, so there are at
/// most four distinct CoTs.
pub fn narrow_instance(seed: u64, index: u64) -> Result<Instance> {
    build_instance(seed, index, 1)
}

fn build_instance(seed: u64, index: u64, cot_tokens: usize) -> Result<Instance> {
    let mut rng = Stream::new(seed, "instance").with_index(index).rng();
    let vocab = Vocab::new(["x", "y", "p", "q"])?;
    let t = |s: &str| vocab.token(s).expect("instance symbol");
    let answer_len = rng.gen_range(1..=2);
    let answer = (0..answer_len).map(|_| if rng.gen_bool(0.5) { t("p") } else { t("q") }).collect();
    let prompt = vec![if rng.gen_bool(0.5) { t("x") } else { t("y") }];
    let example = Example::new(format!("instance-{index}"), prompt, answer)?;
    let cot_horizon = 1 + (index % 3) as usize;
    let layout = TabularLayout {
        prompts: vec![render_prompt(&example)],
        cot_tokens: [t("x"), t("y")][..cot_tokens].to_vec(),
        answer_tokens: vec![t("p"), t("q")],
        cot_horizon,
        answer_horizon: 2,
    };
    let mut policy = TabularPolicy::new(vocab, layout)?;
    policy.randomize(1.5, &mut rng);
    Ok(Instance {
        policy,
        example,
        sampling: SamplingConfig {
            max_new: cot_horizon,
            max_answer: 3,
            temperature: 1.0,
        },
    })
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

/// Relative L2 distance between the finite-difference gradient of the
/// enumerated objective and the exact expectation of the trainer's group
/// gradient.
pub fn lemma_error(
    inst: &Instance,
    variant: RewardVariant,
    group_size: usize,
    h: f64,
    options: &GradientOptions,
) -> Result<f64> {
    let spec = RewardSpec::new(variant);
    let fd = objective_fd_gradient(&inst.policy, &inst.example, &spec, &inst.sampling, group_size, h, SPACE_LIMIT)?;
    let an = expected_surrogate_gradient(
        &inst.policy,
        &inst.example,
        &spec,
        &inst.sampling,
        group_size,
        options,
        SPACE_LIMIT,
    )?;
    Ok(rel_l2(&an, &fd))
}

/// Sample statistics of the single-step estimator against the exact
/// gradient.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnbiasedStats {
    pub coordinates: usize,
    /// Coordinates whose sample mean is more than 3 standard errors away.
    pub exceedances: usize,
    /// Largest exceedance count still consistent with an unbiased estimator.
    pub allowed: usize,
    pub max_z: f64,
}

/// Largest `k` with `P(Binomial(n, p) > k) ≥ alpha`, i.e. the count of
/// 3-sigma exceedances above which an unbiased estimator is rejected.
fn exceedance_allowance(n: usize, p: f64, alpha: f64) -> usize {
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut cdf = pmf;
    let mut k = 0;
    while 1.0 - cdf > alpha && k < n {
        pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
        cdf += pmf;
        k += 1;
    }
    k
}

/// Draws `samples` independent single-step group gradients (no updates) and
/// compares each coordinate's sample mean with the enumerated gradient of the
/// expected reward, in units of the sample standard error.
pub fn unbiasedness(
    inst: &Instance,
    variant: RewardVariant,
    group_size: usize,
    samples: usize,
    seed: u64,
    options: &GradientOptions,
) -> Result<UnbiasedStats> {
    let spec = RewardSpec::new(variant);
    let exact = expected_reward_gradient(&inst.policy, &inst.example, &spec, &inst.sampling, SPACE_LIMIT)?;
    let rendered = render_prompt(&inst.example);
    let with_answer = !variant.is_likelihood();
    let stream = Stream::new(seed, "unbiased").with(variant.name()).with(inst.example.id());
    let d = exact.len();
    let (mut sum, mut sum_sq) = (vec![0.0; d], vec![0.0; d]);
    let mut one = GradBuffer::for_policy(&inst.policy);
    for n in 0..samples {
        let mut rng = stream.clone().with_index(n as u64).rng();
        let rollouts = (0..group_size)
            .map(|_| sample_rollout(&inst.policy, &rendered, with_answer, &inst.sampling, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        one.clear();
        accumulate_group_gradient(
            &inst.policy,
            None,
            &inst.example,
            rollouts,
            &spec,
            options,
            1.0 / group_size as f64,
            &mut one,
        )?;
        for (k, g) in one.grad.iter().enumerate() {
            sum[k] += g;
            sum_sq[k] += g * g;
        }
    }
    let n = samples as f64;
    let (mut coords, mut exceed, mut max_z) = (0, 0, 0.0f64);
    for k in 0..d {
        let mean = sum[k] / n;
        let var = ((sum_sq[k] / n - mean * mean) * n / (n - 1.0)).max(0.0);
        let se = (var / n).sqrt();
        let dev = (mean - exact[k]).abs();
        if se < 1e-12 {
            // a coordinate the samples never moved must match exactly
            if dev > 1e-9 {
                exceed += 1;
                max_z = f64::INFINITY;
            }
            continue;
        }
        coords += 1;
        let z = dev / se;
        max_z = max_z.max(z);
        if z > 3.0 {
            exceed += 1;
        }
    }
    Ok(UnbiasedStats {
        coordinates: coords,
        exceedances: exceed,
        allowed: exceedance_allowance(coords, 0.0027, 1e-3),
        max_z,
    })
}

/// Random group of log-likelihood scores; `equal` makes all members identical.
pub fn random_scores<R: Rng + ?Sized>(rng: &mut R, equal: bool) -> Vec<AnswerScore> {
    let g = rng.gen_range(2..=8);
    let len = rng.gen_range(2..=6);
    let base: Vec<f64> = (0..len).map(|_| -rng.gen_range(0.0..4.0)).collect();
    (0..g)
        .map(|_| {
            let lps = if equal {
                base.clone()
            } else {
                (0..len).map(|_| -rng.gen_range(0.0..4.0)).collect()
            };
            AnswerScore::new(lps).expect("non-positive log-probs")
        })
        .collect()
}

/// Over `groups` random groups: the smallest `lme − mean` gap on distinct
/// groups (must be > 0) and the largest `|lme − mean|` on constant groups.
pub fn jensen_gaps(groups: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = Stream::new(seed, "jensen").rng();
    let (mut min_gap, mut max_equal) = (f64::INFINITY, 0.0f64);
    for i in 0..groups {
        let equal = i % 10 == 0;
        let scores = random_scores(&mut rng, equal);
        let mean = scores.iter().map(logprob_reward).sum::<f64>() / scores.len() as f64;
        let gap = jepo_group_reward(&scores)? - mean;
        if equal {
            max_equal = max_equal.max(gap.abs());
        } else {
            min_gap = min_gap.min(gap);
        }
    }
    Ok((min_gap, max_equal))
}

/// `[E MC1, E MC4, E MC32, exact]` for one instance.
pub fn mc_ladder(inst: &Instance) -> Result<[f64; 4]> {
    let (p, e, n) = (&inst.policy, &inst.example, inst.sampling.max_new);
    Ok([
        expected_logprob_mc(p, e, 1, n, SPACE_LIMIT)?,
        expected_logprob_mc(p, e, 4, n, SPACE_LIMIT)?,
        expected_logprob_mc(p, e, 32, n, SPACE_LIMIT)?,
        exact_marginal_logprob(p, e, n, SPACE_LIMIT)?,
    ])
}

/// Sample count of the `unbiased` suite.
pub const UNBIASED_SAMPLES: usize = 20_000;

pub fn run_suite(suite: Suite, seed: u64, options: &GradientOptions) -> Result<Report> {
    let mut checks = Vec::new();
    if suite.includes(Suite::Lemma) {
        for i in 0..5 {
            let inst = random_instance(seed, i)?;
            for v in PER_ROLLOUT_VARIANTS {
                let err = lemma_error(&inst, v, 2, 1e-4, options)?;
                checks.push(Check {
                    suite: Suite::Lemma,
                    name: format!("instance {i} {}", v.name()),
                    passed: err < 1e-3,
                    value: err,
                    tolerance: 1e-3,
                });
            }
        }
    }
    if suite.includes(Suite::Unbiased) {
        for i in 0..2 {
            let inst = random_instance(seed, i)?;
            for v in PER_ROLLOUT_VARIANTS {
                let s = unbiasedness(&inst, v, 4, UNBIASED_SAMPLES, seed, options)?;
                checks.push(Check {
                    suite: Suite::Unbiased,
                    name: format!("instance {i} {} 3-sigma exceedances", v.name()),
                    passed: s.exceedances <= s.allowed,
                    value: s.exceedances as f64,
                    tolerance: s.allowed as f64,
                });
            }
        }
    }
    if suite.includes(Suite::Jensen) {
        let (min_gap, max_equal) = jensen_gaps(1000, seed)?;
        checks.push(Check {
            suite: Suite::Jensen,
            name: "log-mean-exp exceeds the mean on distinct groups".into(),
            passed: min_gap > 0.0,
            value: min_gap,
            tolerance: 0.0,
        });
        checks.push(Check {
            suite: Suite::Jensen,
            name: "log-mean-exp equals the mean on constant groups".into(),
            passed: max_equal <= 1e-12,
            value: max_equal,
            tolerance: 1e-12,
        });
    }
    if suite.includes(Suite::Mc) {
        for i in 0..5 {
            let inst = narrow_instance(seed, i)?;
            let ladder = mc_ladder(&inst)?;
            let worst = ladder.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
            checks.push(Check {
                suite: Suite::Mc,
                name: format!("instance {i} MC1 <= MC4 <= MC32 <= exact"),
                passed: worst <= 1e-9,
                value: worst,
                tolerance: 1e-9,
            });
        }
    }
    Ok(Report::new(seed, checks))
}

/// The objective at the instance's parameters, exposed for diagnostics.
pub fn instance_objective(inst: &Instance, variant: RewardVariant, group_size: usize) -> Result<f64> {
    expected_objective(
        &inst.policy,
        &inst.example,
        &RewardSpec::new(variant),
        &inst.sampling,
        group_size,
        SPACE_LIMIT,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Policy;

    #[test]
    fn instances_are_small() {
        for i in 0..6 {
            let inst = random_instance(3, i).unwrap();
            assert!(inst.policy.num_params() <= 500, "{}", inst.policy.num_params());
        }
    }

    #[test]
    fn allowance_matches_binomial_tail() {
        assert_eq!(exceedance_allowance(0, 0.0027, 1e-3), 0);
        // 100 coordinates: P(X > 2) ≈ 2.8e-3 ≥ 1e-3, P(X > 3) ≈ 1.9e-4
        assert_eq!(exceedance_allowance(100, 0.0027, 1e-3), 3);
    }

    #[test]
    fn lemma_holds_and_fault_is_caught() {
        let inst = random_instance(0, 1).unwrap();
        let ok = lemma_error(&inst, RewardVariant::Logprob, 2, 1e-4, &GradientOptions::default()).unwrap();
        assert!(ok < 1e-3, "{ok}");
        let broken = GradientOptions {
            flip_advantage: true,
            ..Default::default()
        };
        let bad = lemma_error(&inst, RewardVariant::BinaryVerifier, 2, 1e-4, &broken).unwrap();
        assert!(bad > 1e-2, "{bad}");
    }

    #[test]
    fn jensen_suite_passes() {
        let r = run_suite(Suite::Jensen, 1, &GradientOptions::default()).unwrap();
        assert!(r.passed, "{}", r.human());
    }
}
