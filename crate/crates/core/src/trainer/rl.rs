use rand::Rng;
use rayon::prelude::*;

use super::{apply_update, AdamW, SamplingConfig, StepReport, TrainConfig};
use crate::advantages::{jepo_advantages, jepo_weights, rloo_advantages};
use crate::error::{Error, Result};
use crate::policy::{sample_continuation, score_continuation, GradBuffer, Policy};
use crate::protocol::{parse_completion, render_prompt, Example, Group, Rollout, Token};
use crate::rewards::{
    binary_verifier_reward, direct_gradient_weights, jepo_group_reward, kl_gradient_weight, kl_penalty_term,
    score_reward, AnswerScore, RewardSpec, RewardVariant,
};
use crate::rng::Stream;

/// Test hooks for the gradient estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradientOptions {
    /// Constant added to every reward before advantages are formed.
    pub reward_shift: f64,
    /// Negates every advantage (a deliberately broken estimator).
    pub flip_advantage: bool,
}

/// Samples one completion after the rendered prompt.
///
/// The CoT runs until `<answer>` or `max_new` tokens. When `with_answer` is
/// set and the CoT closed itself, an answer is then sampled until
/// `</answer>` or `max_answer` tokens.
pub fn sample_rollout<P, R>(
    model: &P,
    rendered: &[Token],
    with_answer: bool,
    sampling: &SamplingConfig,
    rng: &mut R,
) -> Result<Rollout>
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    let cot = sample_continuation(model, rendered, sampling.temperature, sampling.max_new, Token::ANS_OPEN, rng)?;
    let mut tokens = cot.tokens;
    let mut logprobs = cot.logprobs;
    let mut truncated = cot.truncated;
    if with_answer && !cot.truncated {
        let mut prefix = rendered.to_vec();
        prefix.extend_from_slice(&tokens);
        let ans = sample_continuation(
            model,
            &prefix,
            sampling.temperature,
            sampling.max_answer,
            Token::ANS_CLOSE,
            rng,
        )?;
        tokens.extend(ans.tokens);
        logprobs.extend(ans.logprobs);
        truncated = ans.truncated;
    }
    Ok(parse_completion(tokens, logprobs, truncated))
}

/// Rewards, advantages and diagnostics of one group.
#[derive(Clone, Debug)]
pub struct GroupOutcome {
    pub group: Group,
    /// Reference-answer scores (likelihood variants only).
    pub scores: Option<Vec<AnswerScore>>,
    /// Mean per-token KL estimate over the group's CoT tokens.
    pub kl: Option<f64>,
}

fn non_finite(what: &str) -> Error {
    Error::NonFiniteLoss {
        step: 0,
        detail: format!("{what} is not finite"),
    }
}

/// Adds `scale · Σ_i [adv_i ∇ log π(z_i) + ∇R_direct_i]` for one group of
/// rollouts of `example`, plus the KL term when `spec.kl_coeff > 0` and a
/// reference policy is given.
///
/// The score-function term covers the CoT and, when sampled, `<answer>`; for
/// the binary verifier it also covers the sampled answer. The direct term
/// differentiates the likelihood reward through the scored reference answer.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_group_gradient<P: Policy + ?Sized>(
    model: &P,
    reference: Option<&P>,
    example: &Example,
    rollouts: Vec<Rollout>,
    spec: &RewardSpec,
    options: &GradientOptions,
    scale: f64,
    buffer: &mut GradBuffer,
) -> Result<GroupOutcome> {
    let g = rollouts.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let rendered = render_prompt(example);
    let variant = spec.variant;
    let penalties: Vec<f64> = rollouts.iter().map(|r| spec.penalty(r.cot_len())).collect();
    let shift = options.reward_shift;

    let mut traces = Vec::with_capacity(g);
    let mut scores = Vec::new();
    if variant.is_likelihood() {
        let target = example.answer_target();
        for r in &rollouts {
            let mut cont = r.cot.clone();
            cont.push(Token::ANS_OPEN);
            cont.extend_from_slice(&target);
            let trace = model.trace(&rendered, &cont)?;
            let lps = model.trace_logprobs(&trace);
            scores.push(AnswerScore::new(lps[r.cot.len() + 1..].to_vec())?);
            traces.push(Some(trace));
        }
    }

    let (rewards, mut advantages) = match variant {
        RewardVariant::Jepo => {
            let group_reward = jepo_group_reward(&scores)?;
            let shifted: Vec<f64> = penalties.iter().map(|p| p + shift).collect();
            let pen_adv = rloo_advantages(&shifted)?;
            let adv: Vec<f64> = jepo_advantages(&scores)?
                .into_iter()
                .zip(pen_adv)
                .map(|(a, b)| a + b)
                .collect();
            (shifted.iter().map(|p| group_reward + p).collect::<Vec<_>>(), adv)
        }
        RewardVariant::BinaryVerifier => {
            let rewards: Vec<f64> = rollouts
                .iter()
                .zip(&penalties)
                .map(|(r, p)| binary_verifier_reward(r, example, &spec.binary_values) + p + shift)
                .collect();
            let adv = rloo_advantages(&rewards)?;
            (rewards, adv)
        }
        _ => {
            let rewards: Vec<f64> = scores
                .iter()
                .zip(&penalties)
                .map(|(s, p)| score_reward(variant, s) + p + shift)
                .collect();
            let adv = rloo_advantages(&rewards)?;
            (rewards, adv)
        }
    };
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(non_finite("a reward"));
    }
    if options.flip_advantage {
        advantages.iter_mut().for_each(|a| *a = -*a);
    }
    let softmax = if variant == RewardVariant::Jepo {
        jepo_weights(&scores)
    } else {
        vec![0.0; g]
    };

    let use_kl = spec.kl_coeff > 0.0 && reference.is_some();
    let mut kl_total = 0.0;
    let mut kl_count = 0usize;
    for (i, r) in rollouts.iter().enumerate() {
        let zlen = r.cot_len();
        let kl_weights = if use_kl && zlen > 0 {
            let ref_lps = score_continuation(reference.unwrap(), &rendered, &r.cot)?;
            let per_tok = spec.kl_coeff / zlen as f64;
            let w: Vec<f64> = r
                .cot_logprobs
                .iter()
                .zip(&ref_lps)
                .map(|(&pl, &rl)| {
                    kl_total += kl_penalty_term(pl, rl);
                    kl_count += 1;
                    kl_gradient_weight(pl, rl, per_tok)
                })
                .collect();
            Some(w)
        } else {
            None
        };

        let adv = advantages[i] * scale;
        let weights: Vec<f64> = if variant.is_likelihood() {
            let direct = direct_gradient_weights(variant, &scores[i], softmax[i]);
            let mut w = vec![adv; zlen];
            w.push(if r.cot_closed { adv } else { 0.0 });
            w.extend(direct.iter().map(|d| d * scale));
            w
        } else {
            if adv == 0.0 && kl_weights.is_none() {
                traces.push(None);
                continue;
            }
            let trace = model.trace(&rendered, &r.completion)?;
            traces.push(Some(trace));
            vec![adv; r.completion.len()]
        };
        let mut weights = weights;
        if let Some(kw) = kl_weights {
            for (w, k) in weights.iter_mut().zip(kw) {
                *w += k * scale;
            }
        }
        if let Some(trace) = traces[i].as_ref() {
            model.backward(trace, &weights, buffer);
        }
        buffer.samples += 1;
    }

    let group = Group::new(example.id(), rollouts, rewards, advantages)?;
    Ok(GroupOutcome {
        group,
        scores: if variant.is_likelihood() { Some(scores) } else { None },
        kl: if use_kl && kl_count > 0 {
            Some(kl_total / kl_count as f64)
        } else {
            None
        },
    })
}

/// Gradient estimate of one batch plus its groups.
#[derive(Clone, Debug)]
pub struct PolicyGradient {
    pub grad: GradBuffer,
    pub groups: Vec<GroupOutcome>,
}

/// Samples `group_size` rollouts per example and accumulates the batch
/// gradient scaled by `1 / (batch · group_size)`. Rollout `i` of batch
/// position `j` draws from `stream / j / example id / i`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_policy_gradient<P: Policy + ?Sized>(
    model: &P,
    reference: Option<&P>,
    batch: &[Example],
    spec: &RewardSpec,
    sampling: &SamplingConfig,
    group_size: usize,
    stream: &Stream,
    options: &GradientOptions,
) -> Result<PolicyGradient> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / (batch.len() * group_size) as f64;
    let with_answer = !spec.variant.is_likelihood();
    let per_example: Vec<(GradBuffer, GroupOutcome)> = batch
        .par_iter()
        .enumerate()
        .map(|(j, example)| {
            let rendered = render_prompt(example);
            let base = stream.clone().with_index(j as u64).with(example.id());
            let rollouts = (0..group_size)
                .map(|i| sample_rollout(model, &rendered, with_answer, sampling, &mut base.clone().with_index(i as u64).rng()))
                .collect::<Result<Vec<_>>>()?;
            let mut buf = GradBuffer::for_policy(model);
            let outcome = accumulate_group_gradient(model, reference, example, rollouts, spec, options, scale, &mut buf)?;
            Ok((buf, outcome))
        })
        .collect::<Result<_>>()?;
    let mut grad = GradBuffer::for_policy(model);
    let mut groups = Vec::with_capacity(batch.len());
    for (buf, outcome) in per_example {
        grad.add(&buf);
        groups.push(outcome);
    }
    Ok(PolicyGradient { grad, groups })
}

/// One RL step at `step` (1-based): estimate, clip, update.
pub fn rl_train_step<P: Policy + ?Sized>(
    model: &mut P,
    reference: Option<&P>,
    batch: &[Example],
    config: &TrainConfig,
    step: usize,
    optimizer: &mut AdamW,
    options: &GradientOptions,
) -> Result<StepReport> {
    let stream = Stream::new(config.seed, "rollout").with_index(step as u64);
    let mut pg = estimate_policy_gradient(
        &*model,
        reference,
        batch,
        &config.reward,
        &config.sampling,
        config.group_size,
        &stream,
        options,
    )
    .map_err(|e| with_step(e, step))?;

    let n = (batch.len() * config.group_size) as f64;
    let mut reward_sum = 0.0;
    let mut len_sum = 0.0;
    let mut lp_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut kl_groups = 0;
    for o in &pg.groups {
        reward_sum += o.group.rewards().iter().sum::<f64>();
        len_sum += o.group.rollouts().iter().map(|r| r.cot_len() as f64).sum::<f64>();
        if let Some(scores) = &o.scores {
            lp_sum += scores.iter().map(AnswerScore::sum_logprob).sum::<f64>();
        }
        if let Some(k) = o.kl {
            kl_sum += k;
            kl_groups += 1;
        }
    }
    let (grad_norm, lr) = apply_update(model.params_mut(), &mut pg.grad, optimizer, config, step)?;
    Ok(StepReport {
        step,
        mean_reward: reward_sum / n,
        mean_cot_length: len_sum / n,
        grad_norm,
        lr,
        answer_logprob: config.reward.variant.is_likelihood().then(|| lp_sum / n),
        kl: (kl_groups > 0).then(|| kl_sum / kl_groups as f64),
        loss: None,
    })
}

pub(crate) fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step, detail },
        other => other,
    }
}
