//! Training: RL with group baselines, the no-CoT SFT baseline and the
//! warm-start SFT on sampled CoTs.
//!
//! Every step follows the same phases: generate (read-only parameters,
//! parallel over questions), accumulate (one gradient buffer per question,
//! summed in batch order), update (clip, AdamW). Gradients in this module are
//! ascent directions of the objective being maximized.

mod optimizer;
mod rl;
mod sft;

use serde::{Deserialize, Serialize};

pub use optimizer::{clip_global_norm, lr_at, AdamW, OptimizerConfig};
pub use rl::{
    accumulate_group_gradient, estimate_policy_gradient, rl_train_step, sample_rollout, GradientOptions,
    GroupOutcome, PolicyGradient,
};
pub use sft::{
    answer_only_gradient, build_warmstart_dataset, masked_answer_gradient, score_warmstart_cot, sft_step,
    sft_target, warmstart_sft_step, WarmstartTriple,
};

use crate::error::{Error, Result};
use crate::rewards::RewardSpec;
use crate::rng::Stream;

/// Token budgets for rollout generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// CoT budget; the CoT is cut here when `<answer>` never appears.
    pub max_new: usize,
    /// Answer budget after `<answer>` (binary verifier only).
    #[serde(default = "default_max_answer")]
    pub max_answer: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_max_answer() -> usize {
    8
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            max_new: 64,
            max_answer: default_max_answer(),
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_questions")]
    pub questions_per_step: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    pub reward: RewardSpec,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_group_size() -> usize {
    8
}
fn default_questions() -> usize {
    8
}
fn default_lr() -> f64 {
    3e-4
}
fn default_warmup() -> usize {
    20
}
fn default_clip() -> f64 {
    1.0
}
fn default_eval_every() -> usize {
    50
}

impl TrainConfig {
    pub fn new(reward: RewardSpec, total_steps: usize) -> Self {
        TrainConfig {
            group_size: default_group_size(),
            questions_per_step: default_questions(),
            learning_rate: default_lr(),
            warmup_steps: default_warmup(),
            total_steps,
            grad_clip_norm: default_clip(),
            reward,
            eval_every: default_eval_every(),
            seed: 0,
            sampling: SamplingConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.questions_per_step == 0 {
            return bad("questions_per_step must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("learning_rate must be >= 0 and grad_clip_norm > 0".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.sampling.max_new == 0 || !(self.sampling.temperature > 0.0) {
            return bad("sampling needs max_new >= 1 and a positive temperature".into());
        }
        self.optimizer.validate()?;
        self.reward.validate()
    }
}

/// Summary of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_cot_length: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Mean log-likelihood of `a* ++ [</answer>]` over the step's rollouts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

/// Dataset positions used at `step` (1-based): consecutive slices of a
/// per-epoch seeded permutation.
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    assert!(n > 0 && step >= 1);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|j| {
            let global = (step - 1) * batch + j;
            let (epoch, pos) = (global / n, global % n);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut Stream::new(seed, "batch").with_index(epoch as u64).rng());
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[pos]
        })
        .collect()
}

/// Shared tail of every step: reject non-finite gradients, clip, update.
pub(crate) fn apply_update(
    params: &mut [f64],
    grad: &mut crate::policy::GradBuffer,
    optimizer: &mut AdamW,
    config: &TrainConfig,
    step: usize,
) -> Result<(f64, f64)> {
    if !grad.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: "gradient has non-finite entries".into(),
        });
    }
    let norm = grad.norm();
    clip_global_norm(grad, config.grad_clip_norm);
    let lr = lr_at(step, config);
    optimizer.step(params, &grad.grad, lr);
    Ok((norm, lr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (1..=5).flat_map(|s| batch_indices(10, 2, s, 3)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 4, 7, 3), batch_indices(10, 4, 7, 3));
    }

    #[test]
    fn config_defaults() {
        let c: TrainConfig =
            serde_json::from_str(r#"{"total_steps": 5, "reward": {"variant": "logprob"}}"#).unwrap();
        assert_eq!(c.group_size, 8);
        assert_eq!(c.questions_per_step, 8);
        assert_eq!(c.warmup_steps, 20);
        assert_eq!(c.grad_clip_norm, 1.0);
        assert_eq!(c.learning_rate, 3e-4);
        c.validate().unwrap();
    }
}
