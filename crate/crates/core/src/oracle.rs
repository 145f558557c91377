//! Exact ground truth by enumeration on small policies.
//!
//! Enumeration mirrors [`sample_rollout`](crate::trainer::sample_rollout)
//! token for token: a CoT ends at `<answer>` or at the token budget (a
//! truncated CoT is a valid terminal path), and for the binary verifier an
//! answer then ends at `</answer>` or at its budget. Paths are visited in
//! lexicographic token order and sums are accumulated in that order, so
//! results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::policy::{accumulate_weighted_logprob_grad, GradBuffer, Policy};
use crate::protocol::{parse_completion, render_prompt, Example, Rollout, Token};
use crate::rewards::{
    binary_verifier_reward, direct_gradient_weights, jepo_group_reward, score_reward, AnswerScore, RewardSpec,
    RewardVariant,
};
use crate::stats::log_sum_exp;
use crate::trainer::{accumulate_group_gradient, GradientOptions, SamplingConfig};

/// Default cap on enumerated sequences.
pub const SPACE_LIMIT: usize = 1_000_000;

/// A terminal continuation: tokens, their log-probabilities, and whether the
/// budget ran out before the stop token.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
    pub truncated: bool,
}

impl Path {
    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

fn too_large(limit: usize) -> Error {
    Error::SpaceTooLarge {
        size: limit + 1,
        limit,
    }
}

/// Every continuation of `prefix` that ends at `stop` or after `max_new`
/// tokens, skipping zero-probability tokens.
pub fn enumerate_continuations<P: Policy + ?Sized>(
    model: &P,
    prefix: &[Token],
    max_new: usize,
    stop: Token,
    limit: usize,
) -> Result<Vec<Path>> {
    fn walk<P: Policy + ?Sized>(
        model: &P,
        context: &mut Vec<Token>,
        current: &mut Path,
        max_new: usize,
        stop: Token,
        limit: usize,
        out: &mut Vec<Path>,
    ) -> Result<()> {
        let lps = model.next_token_logprobs(context)?;
        for (id, &lp) in lps.iter().enumerate() {
            if lp == f64::NEG_INFINITY || lp.exp() == 0.0 {
                continue;
            }
            let tok = Token(id as u16);
            current.tokens.push(tok);
            current.logprobs.push(lp);
            if tok == stop || current.tokens.len() == max_new {
                if out.len() == limit {
                    return Err(too_large(limit));
                }
                out.push(Path {
                    tokens: current.tokens.clone(),
                    logprobs: current.logprobs.clone(),
                    truncated: tok != stop,
                });
            } else {
                context.push(tok);
                walk(model, context, current, max_new, stop, limit, out)?;
                context.pop();
            }
            current.tokens.pop();
            current.logprobs.pop();
        }
        Ok(())
    }
    if max_new == 0 {
        return Err(Error::InvalidArgument("max_new must be positive".into()));
    }
    let mut out = Vec::new();
    let mut current = Path {
        tokens: Vec::new(),
        logprobs: Vec::new(),
        truncated: false,
    };
    walk(model, &mut prefix.to_vec(), &mut current, max_new, stop, limit, &mut out)?;
    Ok(out)
}

/// A rollout together with its exact probability.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutPath {
    pub rollout: Rollout,
    pub logprob: f64,
}

/// Every rollout the sampler can produce for `example`, with probabilities.
pub fn enumerate_rollouts<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    with_answer: bool,
    sampling: &SamplingConfig,
    limit: usize,
) -> Result<Vec<RolloutPath>> {
    if sampling.temperature != 1.0 {
        return Err(Error::InvalidArgument("enumeration assumes temperature 1".into()));
    }
    let rendered = render_prompt(example);
    let mut out = Vec::new();
    for cot in enumerate_continuations(model, &rendered, sampling.max_new, Token::ANS_OPEN, limit)? {
        if !with_answer || cot.truncated {
            out.push(RolloutPath {
                logprob: cot.logprob(),
                rollout: parse_completion(cot.tokens, cot.logprobs, cot.truncated),
            });
        } else {
            let mut prefix = rendered.clone();
            prefix.extend_from_slice(&cot.tokens);
            for ans in enumerate_continuations(model, &prefix, sampling.max_answer, Token::ANS_CLOSE, limit)? {
                let mut tokens = cot.tokens.clone();
                tokens.extend(ans.tokens);
                let mut lps = cot.logprobs.clone();
                lps.extend(ans.logprobs);
                let lp: f64 = lps.iter().sum();
                out.push(RolloutPath {
                    logprob: lp,
                    rollout: parse_completion(tokens, lps, ans.truncated),
                });
            }
        }
        if out.len() > limit {
            return Err(too_large(limit));
        }
    }
    Ok(out)
}

/// Score of `a* ++ [</answer>]` after the rollout's CoT.
pub fn answer_score<P: Policy + ?Sized>(model: &P, example: &Example, rollout: &Rollout) -> Result<AnswerScore> {
    let mut prefix = render_prompt(example);
    prefix.extend_from_slice(&rollout.cot);
    prefix.push(Token::ANS_OPEN);
    AnswerScore::new(crate::policy::score_continuation(model, &prefix, &example.answer_target())?)
}

fn path_reward<P: Policy + ?Sized>(model: &P, example: &Example, spec: &RewardSpec, path: &RolloutPath) -> Result<f64> {
    let base = match spec.variant {
        RewardVariant::BinaryVerifier => binary_verifier_reward(&path.rollout, example, &spec.binary_values),
        v => score_reward(v, &answer_score(model, example, &path.rollout)?),
    };
    Ok(base + spec.penalty(path.rollout.cot_len()))
}

/// `J = Σ_z π(z|p) R(z)` for a per-rollout variant. For JEPO use
/// [`expected_jepo_objective`].
pub fn enumerate_expected_reward<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    spec: &RewardSpec,
    sampling: &SamplingConfig,
    limit: usize,
) -> Result<f64> {
    if spec.variant == RewardVariant::Jepo {
        return Err(Error::InvalidArgument(
            "the JEPO reward is defined on groups; use expected_jepo_objective".into(),
        ));
    }
    let paths = enumerate_rollouts(model, example, !spec.variant.is_likelihood(), sampling, limit)?;
    let mut total = 0.0;
    for p in &paths {
        total += p.logprob.exp() * path_reward(model, example, spec, p)?;
    }
    Ok(total)
}

/// Calls `f(indices, probability)` for every `group_size`-tuple of outcomes.
fn for_each_tuple(
    probs: &[f64],
    group_size: usize,
    limit: usize,
    mut f: impl FnMut(&[usize], f64) -> Result<()>,
) -> Result<()> {
    let k = probs.len();
    let size = (k as f64).powi(group_size as i32);
    if size > limit as f64 {
        return Err(Error::SpaceTooLarge {
            size: size.min(usize::MAX as f64) as usize,
            limit,
        });
    }
    let mut idx = vec![0usize; group_size];
    loop {
        let p: f64 = idx.iter().map(|&i| probs[i]).product();
        if p > 0.0 {
            f(&idx, p)?;
        }
        let mut pos = group_size;
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < k {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// `E[lme_i log π(a*|p,z_i)] / G + E[penalty]` over groups of `G` CoTs:
/// the objective whose gradient the JEPO estimator targets.
pub fn expected_jepo_objective<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    spec: &RewardSpec,
    sampling: &SamplingConfig,
    group_size: usize,
    limit: usize,
) -> Result<f64> {
    let paths = enumerate_rollouts(model, example, false, sampling, limit)?;
    let scores = paths
        .iter()
        .map(|p| answer_score(model, example, &p.rollout))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<f64> = paths.iter().map(|p| p.logprob.exp()).collect();
    let mut total = 0.0;
    for_each_tuple(&probs, group_size, limit, |idx, p| {
        let group: Vec<AnswerScore> = idx.iter().map(|&i| scores[i].clone()).collect();
        total += p * jepo_group_reward(&group)? / group_size as f64;
        Ok(())
    })?;
    let pen: f64 = paths
        .iter()
        .zip(&probs)
        .map(|(path, p)| p * spec.penalty(path.rollout.cot_len()))
        .sum();
    Ok(total + pen)
}

/// Expected objective for any variant (JEPO uses `group_size`).
pub fn expected_objective<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    spec: &RewardSpec,
    sampling: &SamplingConfig,
    group_size: usize,
    limit: usize,
) -> Result<f64> {
    match spec.variant {
        RewardVariant::Jepo => expected_jepo_objective(model, example, spec, sampling, group_size, limit),
        _ => enumerate_expected_reward(model, example, spec, sampling, limit),
    }
}

/// `π^CoT(a*|p) = Σ_z π(z|p) π(a*|p,z)` with CoTs up to `max_new` tokens.
pub fn exact_success_probability<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    max_new: usize,
    limit: usize,
) -> Result<f64> {
    let sampling = SamplingConfig {
        max_new,
        max_answer: 1,
        temperature: 1.0,
    };
    let mut total = 0.0;
    for p in enumerate_rollouts(model, example, false, &sampling, limit)? {
        total += p.logprob.exp() * answer_score(model, example, &p.rollout)?.sum_logprob().exp();
    }
    Ok(total)
}

/// `ln π^CoT(a*|p)` by log-sum-exp over CoT paths.
pub fn exact_marginal_logprob<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    max_new: usize,
    limit: usize,
) -> Result<f64> {
    let (lps, _) = cot_outcomes(model, example, max_new, limit)?;
    Ok(log_sum_exp(&lps))
}

/// Per CoT path: `log π(z) + log π(a*|p,z)` and `log π(a*|p,z)`.
fn cot_outcomes<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    max_new: usize,
    limit: usize,
) -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
    let sampling = SamplingConfig {
        max_new,
        max_answer: 1,
        temperature: 1.0,
    };
    let mut joint = Vec::new();
    let mut outcomes = Vec::new();
    for p in enumerate_rollouts(model, example, false, &sampling, limit)? {
        let a = answer_score(model, example, &p.rollout)?.sum_logprob();
        joint.push(p.logprob + a);
        outcomes.push((p.logprob.exp(), a));
    }
    Ok((joint, outcomes))
}

/// Probability that an answer sampled after `prefix` (within `max_answer`
/// tokens) is exactly `answer` followed by `</answer>`.
pub fn exact_answer_match_probability<P: Policy + ?Sized>(
    model: &P,
    prefix: &[Token],
    answer: &[Token],
    max_answer: usize,
    limit: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for p in enumerate_continuations(model, prefix, max_answer, Token::ANS_CLOSE, limit)? {
        if !p.truncated && p.tokens[..p.tokens.len() - 1] == *answer {
            total += p.logprob().exp();
        }
    }
    Ok(total)
}

/// Exact `E[logprob-MC_n]` for one example: the expectation of
/// `ln((1/n) Σ_i π(a*|p,z_i))` over `n` independent CoTs, summed over the
/// multinomial counts of CoT outcomes.
pub fn expected_logprob_mc<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    n: usize,
    max_new: usize,
    limit: usize,
) -> Result<f64> {
    let (_, outcomes) = cot_outcomes(model, example, max_new, limit)?;
    let outcomes: Vec<(f64, f64)> = outcomes.into_iter().filter(|o| o.0 > 0.0).collect();
    let k = outcomes.len();
    let mut ln_fact = vec![0.0f64; n + 1];
    for i in 1..=n {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let ln_p: Vec<f64> = outcomes.iter().map(|o| o.0.ln()).collect();
    let ln_a: Vec<f64> = outcomes.iter().map(|o| o.1).collect();
    let mut counts = vec![0usize; k];
    let mut total = 0.0;
    let mut visited = 0usize;
    compositions(n, k, 0, &mut counts, &mut |c| {
        visited += 1;
        if visited > limit {
            return Err(too_large(limit));
        }
        let mut ln_prob = ln_fact[n];
        let mut terms = Vec::with_capacity(k);
        for j in 0..k {
            ln_prob += c[j] as f64 * ln_p[j] - ln_fact[c[j]];
            if c[j] > 0 {
                terms.push((c[j] as f64).ln() + ln_a[j]);
            }
        }
        total += ln_prob.exp() * (log_sum_exp(&terms) - (n as f64).ln());
        Ok(())
    })?;
    Ok(total)
}

fn compositions(
    remaining: usize,
    k: usize,
    pos: usize,
    counts: &mut Vec<usize>,
    f: &mut impl FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if pos + 1 == k {
        counts[pos] = remaining;
        return f(counts);
    }
    for c in 0..=remaining {
        counts[pos] = c;
        compositions(remaining - c, k, pos + 1, counts, f)?;
    }
    Ok(())
}

/// Central differences `(f(θ + h e_k) − f(θ − h e_k)) / 2h`.
pub fn finite_difference_grad<F>(mut objective: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        x[k] = theta[k] + h;
        let up = objective(&x)?;
        x[k] = theta[k] - h;
        let down = objective(&x)?;
        x[k] = theta[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteObjective(k));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Finite differences of [`expected_objective`] with respect to the policy's
/// parameters.
pub fn objective_fd_gradient<P: Policy + Clone>(
    model: &P,
    example: &Example,
    spec: &RewardSpec,
    sampling: &SamplingConfig,
    group_size: usize,
    h: f64,
    limit: usize,
) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    finite_difference_grad(
        |theta| {
            probe.params_mut().copy_from_slice(theta);
            expected_objective(&probe, example, spec, sampling, group_size, limit)
        },
        model.params(),
        h,
    )
}

/// `Σ_z π(z) [R(z) ∇ log π(z) + ∇R(z)]`, built directly from path
/// probabilities without any baseline (not defined for JEPO).
pub fn expected_reward_gradient<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    spec: &RewardSpec,
    sampling: &SamplingConfig,
    limit: usize,
) -> Result<Vec<f64>> {
    if spec.variant == RewardVariant::Jepo {
        return Err(Error::InvalidArgument("JEPO has no per-rollout reward".into()));
    }
    let rendered = render_prompt(example);
    let mut buf = GradBuffer::for_policy(model);
    for path in enumerate_rollouts(model, example, !spec.variant.is_likelihood(), sampling, limit)? {
        let p = path.logprob.exp();
        let r = path_reward(model, example, spec, &path)?;
        accumulate_weighted_logprob_grad(model, &mut buf, &rendered, &path.rollout.completion, p * r)?;
        if spec.variant.is_likelihood() {
            let score = answer_score(model, example, &path.rollout)?;
            let weights = direct_gradient_weights(spec.variant, &score, 0.0);
            let mut prefix = rendered.clone();
            prefix.extend_from_slice(&path.rollout.cot);
            prefix.push(Token::ANS_OPEN);
            let trace = model.trace(&prefix, &example.answer_target())?;
            let scaled: Vec<f64> = weights.iter().map(|w| w * p).collect();
            model.backward(&trace, &scaled, &mut buf);
        }
    }
    Ok(buf.grad)
}

/// Exact expectation of the trainer's group gradient (one example, batch of
/// one) over all `group_size`-tuples of rollouts.
pub fn expected_surrogate_gradient<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    spec: &RewardSpec,
    sampling: &SamplingConfig,
    group_size: usize,
    options: &GradientOptions,
    limit: usize,
) -> Result<Vec<f64>> {
    let paths = enumerate_rollouts(model, example, !spec.variant.is_likelihood(), sampling, limit)?;
    let probs: Vec<f64> = paths.iter().map(|p| p.logprob.exp()).collect();
    let mut buf = GradBuffer::for_policy(model);
    for_each_tuple(&probs, group_size, limit, |idx, p| {
        let rollouts: Vec<Rollout> = idx.iter().map(|&i| paths[i].rollout.clone()).collect();
        accumulate_group_gradient(model, None, example, rollouts, spec, options, p / group_size as f64, &mut buf)?;
        Ok(())
    })?;
    Ok(buf.grad)
}

/// Exact per-coordinate mean and variance of the single-step group
/// gradient estimator.
pub fn surrogate_gradient_moments<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    spec: &RewardSpec,
    sampling: &SamplingConfig,
    group_size: usize,
    limit: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let paths = enumerate_rollouts(model, example, !spec.variant.is_likelihood(), sampling, limit)?;
    let probs: Vec<f64> = paths.iter().map(|p| p.logprob.exp()).collect();
    let d = model.num_params();
    let (mut m1, mut m2) = (vec![0.0; d], vec![0.0; d]);
    for_each_tuple(&probs, group_size, limit, |idx, p| {
        let rollouts: Vec<Rollout> = idx.iter().map(|&i| paths[i].rollout.clone()).collect();
        let mut buf = GradBuffer::for_policy(model);
        let opts = GradientOptions::default();
        accumulate_group_gradient(model, None, example, rollouts, spec, &opts, 1.0 / group_size as f64, &mut buf)?;
        for (k, g) in buf.grad.iter().enumerate() {
            m1[k] += p * g;
            m2[k] += p * g * g;
        }
        Ok(())
    })?;
    let var = m1.iter().zip(&m2).map(|(a, b)| (b - a * a).max(0.0)).collect();
    Ok((m1, var))
}

/// Exact per-context KL divergence `Σ_t π(t) (log π(t) − log π_ref(t))`.
pub fn exact_kl<P: Policy + ?Sized>(policy: &P, reference: &P, context: &[Token]) -> Result<f64> {
    let a = policy.next_token_logprobs(context)?;
    let b = reference.next_token_logprobs(context)?;
    Ok(a.iter()
        .zip(&b)
        .filter(|(la, _)| la.is_finite())
        .map(|(la, lb)| la.exp() * (la - lb))
        .sum())
}
