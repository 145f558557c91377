//! Reward variants, the length penalty and the per-token KL estimator.
//!
//! Likelihood rewards are functions of an [`AnswerScore`]: the teacher-forced
//! log-probabilities of the reference answer followed by `</answer>`, scored
//! after `prompt ++ cot ++ <answer>`. Per-token averages divide by the number
//! of answer tokens only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{Example, Rollout};
use crate::stats::log_mean_exp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    BinaryVerifier,
    Probability,
    AvgProbability,
    Logprob,
    AvgLogprob,
    Jepo,
}

impl RewardVariant {
    pub const ALL: [RewardVariant; 6] = [
        RewardVariant::BinaryVerifier,
        RewardVariant::Probability,
        RewardVariant::AvgProbability,
        RewardVariant::Logprob,
        RewardVariant::AvgLogprob,
        RewardVariant::Jepo,
    ];

    /// Variants whose reward scores the reference answer instead of a sampled one.
    pub fn is_likelihood(self) -> bool {
        self != RewardVariant::BinaryVerifier
    }

    pub fn name(self) -> &'static str {
        match self {
            RewardVariant::BinaryVerifier => "binary_verifier",
            RewardVariant::Probability => "probability",
            RewardVariant::AvgProbability => "avg_probability",
            RewardVariant::Logprob => "logprob",
            RewardVariant::AvgLogprob => "avg_logprob",
            RewardVariant::Jepo => "jepo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryValues {
    pub correct: f64,
    pub format_only: f64,
    pub unparsable: f64,
}

impl Default for BinaryValues {
    fn default() -> Self {
        BinaryValues {
            correct: 100.0,
            format_only: 10.0,
            unparsable: 0.0,
        }
    }
}

/// `rate · min(|z| − threshold, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthPenalty {
    pub rate: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub variant: RewardVariant,
    #[serde(default)]
    pub binary_values: BinaryValues,
    #[serde(default)]
    pub length_penalty: Option<LengthPenalty>,
    #[serde(default)]
    pub kl_coeff: f64,
}

impl RewardSpec {
    pub fn new(variant: RewardVariant) -> Self {
        RewardSpec {
            variant,
            binary_values: BinaryValues::default(),
            length_penalty: None,
            kl_coeff: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kl_coeff >= 0.0) || !self.kl_coeff.is_finite() {
            return Err(Error::InvalidArgument(format!("kl_coeff must be >= 0, got {}", self.kl_coeff)));
        }
        if let Some(lp) = self.length_penalty {
            if !(lp.rate >= 0.0 && lp.threshold >= 0.0) {
                return Err(Error::InvalidArgument("length penalty rate and threshold must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Length penalty for a CoT of `cot_len` tokens (0 when not configured).
    pub fn penalty(&self, cot_len: usize) -> f64 {
        self.length_penalty
            .map_or(0.0, |lp| length_penalty(cot_len, lp.rate, lp.threshold))
    }
}

/// Log-probabilities of `a* ++ [</answer>]` given a CoT.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerScore {
    per_token: Vec<f64>,
    answer_len: usize,
}

impl AnswerScore {
    /// `per_token` covers the answer tokens followed by the terminator.
    pub fn new(per_token: Vec<f64>) -> Result<Self> {
        if per_token.len() < 2 {
            return Err(Error::InvalidArgument(
                "an answer score needs at least one answer token plus the terminator".into(),
            ));
        }
        if per_token.iter().any(|&lp| lp.is_nan() || lp > 0.0) {
            return Err(Error::InvalidArgument("log-probabilities must be <= 0".into()));
        }
        let answer_len = per_token.len() - 1;
        Ok(AnswerScore { per_token, answer_len })
    }

    pub fn per_token_logprobs(&self) -> &[f64] {
        &self.per_token
    }

    /// The answer tokens only, without the terminator.
    pub fn answer_logprobs(&self) -> &[f64] {
        &self.per_token[..self.answer_len]
    }

    pub fn sum_logprob(&self) -> f64 {
        self.per_token.iter().sum()
    }

    pub fn answer_len(&self) -> usize {
        self.answer_len
    }
}

pub fn binary_verifier_reward(rollout: &Rollout, example: &Example, values: &BinaryValues) -> f64 {
    if !rollout.parse_ok {
        values.unparsable
    } else if rollout.answer == example.answer() {
        values.correct
    } else {
        values.format_only
    }
}

pub fn probability_reward(score: &AnswerScore) -> f64 {
    score.sum_logprob().exp()
}

/// Mean per-token probability of the answer tokens. The terminator's
/// probability folds into the last answer token, which counts as the joint
/// event "last token, then `</answer>`"; otherwise nothing would reward
/// closing the answer.
pub fn avg_probability_reward(score: &AnswerScore) -> f64 {
    avg_probability_terms(score).iter().sum::<f64>() / score.answer_len as f64
}

fn avg_probability_terms(score: &AnswerScore) -> Vec<f64> {
    let k = score.answer_len;
    let mut terms: Vec<f64> = score.per_token[..k].iter().map(|lp| lp.exp()).collect();
    terms[k - 1] = (score.per_token[k - 1] + score.per_token[k]).exp();
    terms
}

pub fn logprob_reward(score: &AnswerScore) -> f64 {
    score.sum_logprob()
}

pub fn avg_logprob_reward(score: &AnswerScore) -> f64 {
    score.sum_logprob() / score.answer_len() as f64
}

/// Log-mean-exp of the group's answer log-likelihoods.
pub fn jepo_group_reward(scores: &[AnswerScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let sums: Vec<f64> = scores.iter().map(AnswerScore::sum_logprob).collect();
    Ok(log_mean_exp(&sums))
}

/// Per-rollout reward of a likelihood variant other than JEPO.
pub fn score_reward(variant: RewardVariant, score: &AnswerScore) -> f64 {
    match variant {
        RewardVariant::Probability => probability_reward(score),
        RewardVariant::AvgProbability => avg_probability_reward(score),
        RewardVariant::Logprob => logprob_reward(score),
        RewardVariant::AvgLogprob => avg_logprob_reward(score),
        RewardVariant::Jepo => logprob_reward(score),
        RewardVariant::BinaryVerifier => {
            panic!("the binary verifier reward is computed from a sampled answer")
        }
    }
}

/// Per-token weights `w_t` such that `Σ_t w_t ∇ log π(target_t | ·)` is the
/// gradient of the reward with respect to the answer likelihood, over the
/// positions of `a* ++ [</answer>]`. `jepo_weight` is the member's softmax
/// weight within its group and is only read for JEPO.
pub fn direct_gradient_weights(variant: RewardVariant, score: &AnswerScore, jepo_weight: f64) -> Vec<f64> {
    let n = score.per_token.len();
    let k = score.answer_len as f64;
    match variant {
        RewardVariant::BinaryVerifier => vec![0.0; n],
        RewardVariant::Logprob => vec![1.0; n],
        RewardVariant::AvgLogprob => vec![1.0 / k; n],
        RewardVariant::Probability => vec![probability_reward(score); n],
        RewardVariant::AvgProbability => {
            let mut w: Vec<f64> = avg_probability_terms(score).iter().map(|p| p / k).collect();
            w.push(w[w.len() - 1]);
            w
        }
        RewardVariant::Jepo => vec![jepo_weight; n],
    }
}

pub fn length_penalty(cot_len: usize, rate: f64, threshold: f64) -> f64 {
    rate * (cot_len as f64 - threshold).min(0.0)
}

/// Rate at which the penalty offsets the reward gained while the CoT shrank
/// by `delta_length` tokens.
pub fn calibrate_length_rate(delta_reward: f64, delta_length: f64) -> Result<f64> {
    if !(delta_length > 0.0) {
        return Err(Error::ZeroLengthDelta(delta_length));
    }
    Ok(delta_reward / delta_length)
}

/// Non-negative KL estimator `exp(u) − u − 1` with `u = ref − policy` for one
/// sampled token.
pub fn kl_penalty_term(policy_logprob: f64, ref_logprob: f64) -> f64 {
    let u = ref_logprob - policy_logprob;
    u.exp_m1() - u
}

/// Weight on `∇ log π(token)` of the ascent direction for `−β · kl_penalty_term`.
pub fn kl_gradient_weight(policy_logprob: f64, ref_logprob: f64, beta: f64) -> f64 {
    beta * (ref_logprob - policy_logprob).exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{parse_completion, Token};

    fn score(lps: &[f64]) -> AnswerScore {
        let mut v = lps.to_vec();
        v.push(0.0);
        AnswerScore::new(v).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-6
    }

    #[test]
    fn binary_values() {
        let ex = Example::new("e", vec![Token(6)], vec![Token(13)]).unwrap();
        let v = BinaryValues::default();
        let r = |toks: Vec<Token>| {
            let n = toks.len();
            parse_completion(toks, vec![0.0; n], false)
        };
        let correct = r(vec![Token::ANS_OPEN, Token(13), Token::ANS_CLOSE]);
        let wrong = r(vec![Token::ANS_OPEN, Token(14), Token::ANS_CLOSE]);
        let broken = r(vec![Token(6), Token::ANS_OPEN, Token(14)]);
        assert_eq!(binary_verifier_reward(&correct, &ex, &v), 100.0);
        assert_eq!(binary_verifier_reward(&wrong, &ex, &v), 10.0);
        assert_eq!(binary_verifier_reward(&broken, &ex, &v), 0.0);
    }

    #[test]
    fn likelihood_rewards() {
        let s = score(&[-0.5, -1.0, -0.25]);
        assert!(close(probability_reward(&s), 0.173774));
        assert!(close(avg_probability_reward(&s), 0.584404));
        assert!(close(logprob_reward(&s), -1.75));
        assert!(close(avg_logprob_reward(&s), -0.583333));
        let certain = score(&[0.0, 0.0]);
        assert_eq!(probability_reward(&certain), 1.0);
        assert_eq!(avg_probability_reward(&certain), 1.0);
        assert_eq!(logprob_reward(&certain), 0.0);
        let half = score(&[-(2f64.ln())]);
        assert!(close(avg_probability_reward(&half), 0.5));
        assert_eq!(avg_logprob_reward(&half), logprob_reward(&half));
        assert_eq!(avg_logprob_reward(&score(&[-1.0, -1.0])), -1.0);
        assert_eq!(logprob_reward(&score(&[-1.0, -1.0])), -2.0);
    }

    #[test]
    fn avg_probability_counts_the_terminator_with_the_last_token() {
        let s = AnswerScore::new(vec![-0.5, -1.0, -0.7]).unwrap();
        let want = ((-0.5f64).exp() + (-1.7f64).exp()) / 2.0;
        assert!((avg_probability_reward(&s) - want).abs() < 1e-15);
        let w = direct_gradient_weights(RewardVariant::AvgProbability, &s, 0.0);
        assert_eq!(w, vec![(-0.5f64).exp() / 2.0, (-1.7f64).exp() / 2.0, (-1.7f64).exp() / 2.0]);
    }

    #[test]
    fn jepo_reward() {
        assert!(matches!(jepo_group_reward(&[]), Err(Error::EmptyGroup)));
        let g = [score(&[-1.0]), score(&[-3.0])];
        assert!(close(jepo_group_reward(&g).unwrap(), -1.566219));
        let same = [score(&[-2.0]), score(&[-2.0]), score(&[-2.0])];
        assert!((jepo_group_reward(&same).unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn penalties() {
        assert_eq!(length_penalty(5, 0.5, 8.0), -1.5);
        assert_eq!(length_penalty(10, 0.5, 8.0), 0.0);
        assert_eq!(length_penalty(3, 0.0, 8.0), 0.0);
        assert!((calibrate_length_rate(6.0, 300.0).unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(calibrate_length_rate(0.0, 10.0).unwrap(), 0.0);
        assert!(matches!(calibrate_length_rate(1.0, 0.0), Err(Error::ZeroLengthDelta(_))));
        assert_eq!(kl_penalty_term(-1.2, -1.2), 0.0);
        assert!(close(kl_penalty_term(0.0, 2f64.ln()), 0.306853));
    }

    #[test]
    fn scores_reject_positive_logprobs() {
        assert!(AnswerScore::new(vec![0.1, 0.0]).is_err());
        assert!(AnswerScore::new(vec![-0.1]).is_err());
    }

    #[test]
    fn spec_serde_names() {
        let spec: RewardSpec = serde_json::from_str(r#"{"variant":"avg_logprob"}"#).unwrap();
        assert_eq!(spec.variant, RewardVariant::AvgLogprob);
        assert_eq!(spec.binary_values, BinaryValues::default());
        assert!(serde_json::from_str::<RewardSpec>(r#"{"variant":"bogus"}"#).is_err());
    }
}
