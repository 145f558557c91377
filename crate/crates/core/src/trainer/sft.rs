use rayon::prelude::*;

use super::rl::with_step;
use super::{apply_update, AdamW, SamplingConfig, StepReport, TrainConfig};
use crate::error::{Error, Result};
use crate::policy::{accumulate_weighted_logprob_grad, sample_continuation, score_continuation, GradBuffer, Policy};
use crate::protocol::{render_prompt, Example, Token};
use crate::rng::Stream;

/// `[</think>, <answer>] ++ a* ++ [</answer>]`: the answer with the shortest
/// possible CoT.
pub fn sft_target(example: &Example) -> Vec<Token> {
    let mut t = vec![Token::THINK_CLOSE, Token::ANS_OPEN];
    t.extend(example.answer_target());
    t
}

/// A prompt, one CoT sampled from the initial model, and the reference answer.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmstartTriple {
    pub example: Example,
    /// CoT tokens before `<answer>`.
    pub cot: Vec<Token>,
}

impl WarmstartTriple {
    /// `render(prompt) ++ cot ++ [<answer>]`.
    pub fn answer_prefix(&self) -> Vec<Token> {
        let mut p = render_prompt(&self.example);
        p.extend_from_slice(&self.cot);
        p.push(Token::ANS_OPEN);
        p
    }
}

/// Maximizes the mean of `log π(target_j | prefix_j)` over the batch.
fn supervised_step<P: Policy + ?Sized>(
    model: &mut P,
    items: &[(Vec<Token>, Vec<Token>)],
    config: &TrainConfig,
    step: usize,
    optimizer: &mut AdamW,
    cot_length: f64,
) -> Result<StepReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let weight = 1.0 / items.len() as f64;
    let parts: Vec<(GradBuffer, f64)> = items
        .par_iter()
        .map(|(prefix, target)| {
            let mut buf = GradBuffer::for_policy(&*model);
            let trace = model.trace(prefix, target)?;
            let lp: f64 = model.trace_logprobs(&trace).iter().sum();
            model.backward(&trace, &vec![weight; target.len()], &mut buf);
            Ok((buf, lp))
        })
        .collect::<Result<_>>()?;
    let mut grad = GradBuffer::for_policy(&*model);
    let mut total = 0.0;
    for (buf, lp) in parts {
        grad.add(&buf);
        total += lp;
    }
    let mean_lp = total * weight;
    if !mean_lp.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("mean target log-likelihood is {mean_lp}"),
        });
    }
    let (grad_norm, lr) = apply_update(model.params_mut(), &mut grad, optimizer, config, step)?;
    Ok(StepReport {
        step,
        mean_reward: mean_lp,
        mean_cot_length: cot_length,
        grad_norm,
        lr,
        answer_logprob: Some(mean_lp),
        kl: None,
        loss: Some(-mean_lp),
    })
}

/// SFT without a CoT: the loss is the mean negative log-likelihood of
/// [`sft_target`] after the rendered prompt.
pub fn sft_step<P: Policy + ?Sized>(
    model: &mut P,
    batch: &[Example],
    config: &TrainConfig,
    step: usize,
    optimizer: &mut AdamW,
) -> Result<StepReport> {
    let items: Vec<_> = batch.iter().map(|e| (render_prompt(e), sft_target(e))).collect();
    supervised_step(model, &items, config, step, optimizer, 1.0)
}

/// `samples_per_prompt` CoTs per example from `model` at temperature 1, each
/// paired with the reference answer. Sample `i` of example `e` draws from
/// `seed / "warmstart" / e.id / i`.
pub fn build_warmstart_dataset<P: Policy + ?Sized>(
    model: &P,
    examples: &[Example],
    samples_per_prompt: usize,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Vec<WarmstartTriple>> {
    let per_example: Vec<Vec<WarmstartTriple>> = examples
        .par_iter()
        .map(|example| {
            let rendered = render_prompt(example);
            (0..samples_per_prompt)
                .map(|i| {
                    let mut rng = Stream::new(seed, "warmstart")
                        .with(example.id())
                        .with_index(i as u64)
                        .rng();
                    let s = sample_continuation(model, &rendered, 1.0, sampling.max_new, Token::ANS_OPEN, &mut rng)?;
                    let mut cot = s.tokens;
                    if !s.truncated {
                        cot.pop();
                    }
                    Ok(WarmstartTriple {
                        example: example.clone(),
                        cot,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_example.into_iter().flatten().collect())
}

/// SFT on `a* ++ [</answer>]` after `prompt ++ cot ++ [<answer>]`; the CoT
/// is context only and carries no loss.
pub fn warmstart_sft_step<P: Policy + ?Sized>(
    model: &mut P,
    batch: &[WarmstartTriple],
    config: &TrainConfig,
    step: usize,
    optimizer: &mut AdamW,
) -> Result<StepReport> {
    let items: Vec<_> = batch
        .iter()
        .map(|t| (t.answer_prefix(), t.example.answer_target()))
        .collect();
    let cot_len = batch.iter().map(|t| t.cot.len() as f64).sum::<f64>() / batch.len().max(1) as f64;
    supervised_step(model, &items, config, step, optimizer, cot_len).map_err(|e| with_step(e, step))
}

/// Re-scores a triple's CoT under `model`.
pub fn score_warmstart_cot<P: Policy + ?Sized>(model: &P, triple: &WarmstartTriple) -> Result<Vec<f64>> {
    score_continuation(model, &render_prompt(&triple.example), &triple.cot)
}

/// `∇` of the answer-only loss computed by scoring the full `cot ++ answer`
/// continuation with zero weight on CoT positions.
pub fn masked_answer_gradient<P: Policy + ?Sized>(model: &P, triple: &WarmstartTriple) -> Result<GradBuffer> {
    let mut cont = triple.cot.clone();
    cont.push(Token::ANS_OPEN);
    cont.extend(triple.example.answer_target());
    let trace = model.trace(&render_prompt(&triple.example), &cont)?;
    let answer_start = triple.cot.len() + 1;
    let weights: Vec<f64> = (0..cont.len()).map(|i| if i >= answer_start { 1.0 } else { 0.0 }).collect();
    let mut buf = GradBuffer::for_policy(model);
    model.backward(&trace, &weights, &mut buf);
    Ok(buf)
}

/// `∇ log π(a* ++ [</answer>] | prompt ++ cot ++ [<answer>])` from a pass over
/// the answer alone.
pub fn answer_only_gradient<P: Policy + ?Sized>(model: &P, triple: &WarmstartTriple) -> Result<GradBuffer> {
    let mut buf = GradBuffer::for_policy(model);
    accumulate_weighted_logprob_grad(model, &mut buf, &triple.answer_prefix(), &triple.example.answer_target(), 1.0)?;
    Ok(buf)
}
