//! Leave-one-out advantages. No normalization by the group's spread.

use crate::error::{Error, Result};
use crate::rewards::AnswerScore;
use crate::stats::log_mean_exp;

/// `adv_i = r_i − mean_{j≠i} r_j`.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let total: f64 = rewards.iter().sum();
    let others = (g - 1) as f64;
    Ok(rewards.iter().map(|&r| r - (total - r) / others).collect())
}

/// `adv_i = lme(all sums) − lme(sums without i)`.
pub fn jepo_advantages(scores: &[AnswerScore]) -> Result<Vec<f64>> {
    let g = scores.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let sums: Vec<f64> = scores.iter().map(AnswerScore::sum_logprob).collect();
    let full = log_mean_exp(&sums);
    let mut rest = Vec::with_capacity(g - 1);
    Ok((0..g)
        .map(|i| {
            rest.clear();
            rest.extend(sums.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &s)| s));
            full - log_mean_exp(&rest)
        })
        .collect())
}

/// Softmax weights `exp(s_i) / Σ_j exp(s_j)` of the group's answer log-likelihoods.
pub fn jepo_weights(scores: &[AnswerScore]) -> Vec<f64> {
    let sums: Vec<f64> = scores.iter().map(AnswerScore::sum_logprob).collect();
    let max = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sums.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(sum: f64) -> AnswerScore {
        AnswerScore::new(vec![sum, 0.0]).unwrap()
    }

    #[test]
    fn rloo_examples() {
        assert_eq!(
            rloo_advantages(&[100.0, 10.0, 10.0, 100.0]).unwrap(),
            vec![60.0, -60.0, -60.0, 60.0]
        );
        assert_eq!(rloo_advantages(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        assert!(matches!(rloo_advantages(&[1.0]), Err(Error::GroupTooSmall(1))));
    }

    #[test]
    fn jepo_examples() {
        let adv = jepo_advantages(&[score(-1.0), score(-3.0)]).unwrap();
        assert!((adv[0] - 1.433_780_830_5).abs() < 1e-9);
        assert!((adv[1] + 0.566_219_169_5).abs() < 1e-9);
        let same = jepo_advantages(&[score(-2.0), score(-2.0), score(-2.0)]).unwrap();
        assert!(same.iter().all(|a| a.abs() < 1e-12));
        let w = jepo_weights(&[score(-1.0), score(-1.0)]);
        assert_eq!(w, vec![0.5, 0.5]);
    }
}
