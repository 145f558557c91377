//! Randomized invariants of rewards, advantages, statistics and policies.

use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use cotlab::advantages::{jepo_advantages, jepo_weights, rloo_advantages};
use cotlab::policy::{
    next_token_distribution, sample_continuation, GradBuffer, Policy, TabularLayout, TabularPolicy, TinyLm,
    TinyLmConfig,
};
use cotlab::protocol::{Example, Token, Vocab};
use cotlab::rewards::{
    avg_logprob_reward, avg_probability_reward, calibrate_length_rate, jepo_group_reward, length_penalty,
    logprob_reward, probability_reward, AnswerScore,
};
use cotlab::rng::Stream;
use cotlab::stats::{log_mean_exp, pearson};
use cotlab::trainer::clip_global_norm;

fn score_strategy() -> impl Strategy<Value = AnswerScore> {
    prop::collection::vec(-6.0f64..0.0, 2..8).prop_map(|v| AnswerScore::new(v).unwrap())
}

fn group_strategy() -> impl Strategy<Value = Vec<AnswerScore>> {
    prop::collection::vec(score_strategy(), 2..8)
}

proptest! {
    #[test]
    fn rloo_sums_to_zero_and_ignores_offsets(
        rewards in prop::collection::vec(-100.0f64..100.0, 2..20),
        shift in -1e3f64..1e3,
        scale in 0.1f64..10.0,
    ) {
        let a = rloo_advantages(&rewards).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        for (x, y) in a.iter().zip(rloo_advantages(&shifted).unwrap()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
        for (x, y) in a.iter().zip(rloo_advantages(&scaled).unwrap()) {
            prop_assert!((x * scale - y).abs() < 1e-9);
        }
    }

    #[test]
    fn score_rewards_agree(score in score_strategy()) {
        let lp = logprob_reward(&score);
        prop_assert!(lp <= 0.0);
        prop_assert!((lp - probability_reward(&score).ln()).abs() < 1e-12);
        let n = score.answer_len() as f64;
        prop_assert!((avg_logprob_reward(&score) - lp / n).abs() < 1e-12);
        let p = probability_reward(&score);
        prop_assert!(p > 0.0 && p <= 1.0);
        let ap = avg_probability_reward(&score);
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }

    #[test]
    fn group_log_mean_exp_dominates_the_mean(group in group_strategy()) {
        let mean = group.iter().map(logprob_reward).sum::<f64>() / group.len() as f64;
        let lme = jepo_group_reward(&group).unwrap();
        prop_assert!(lme >= mean - 1e-12);
        let sums: Vec<f64> = group.iter().map(logprob_reward).collect();
        prop_assert!((lme - log_mean_exp(&sums)).abs() < 1e-12);
    }

    #[test]
    fn leave_one_out_log_mean_exp_matches_its_definition(group in group_strategy()) {
        let adv = jepo_advantages(&group).unwrap();
        let sums: Vec<f64> = group.iter().map(logprob_reward).collect();
        for i in 0..group.len() {
            let rest: Vec<f64> = sums.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &s)| s).collect();
            prop_assert!((adv[i] - (log_mean_exp(&sums) - log_mean_exp(&rest))).abs() < 1e-9);
        }
        let w = jepo_weights(&group);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn length_penalty_is_non_positive(len in 0usize..500, rate in 0.0f64..5.0, threshold in 0.0f64..400.0) {
        let p = length_penalty(len, rate, threshold);
        prop_assert!(p <= 0.0);
        if len as f64 >= threshold {
            prop_assert_eq!(p, 0.0);
        }
    }

    #[test]
    fn calibrated_rate_compensates_the_reward_gain(dr in -10.0f64..10.0, dl in 0.01f64..300.0) {
        let r = calibrate_length_rate(dr, dl).unwrap();
        prop_assert!((r * dl - dr).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_norm(g in prop::collection::vec(-10.0f64..10.0, 1..30), threshold in 0.01f64..5.0) {
        let mut buf = GradBuffer { grad: g.clone(), samples: 1 };
        let before = buf.norm();
        clip_global_norm(&mut buf, threshold);
        prop_assert!(buf.norm() <= threshold.max(before) * (1.0 + 1e-12));
        if before <= threshold {
            prop_assert_eq!(&buf.grad, &g);
        } else {
            prop_assert!((buf.norm() - threshold).abs() < 1e-9);
        }
    }

    #[test]
    fn pearson_is_affine_invariant(
        pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
        a in 0.1f64..5.0,
        b in -5.0f64..5.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        if let Some(r) = pearson(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&r));
            let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&moved, &y).unwrap() - r).abs() < 1e-9);
            let flipped: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert!((pearson(&flipped, &y).unwrap() + r).abs() < 1e-9);
        }
    }
}

fn small_lm(seed: u64) -> TinyLm {
    let config = TinyLmConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        context: 16,
        init_std: 0.5,
    };
    TinyLm::new(config, Vocab::builtin(), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn next_token_distributions_are_normalized(seed in 0u64..1000, len in 1usize..10) {
        let lm = small_lm(seed);
        let mut rng = Stream::new(seed, "context").rng();
        let context: Vec<Token> = (0..len)
            .map(|_| Token(rand::Rng::gen_range(&mut rng, 0..lm.vocab().size()) as u16))
            .collect();
        let p = next_token_distribution(&lm, &context).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x > 0.0));
    }

    /// `Σ_t π(t) ∇ log π(t) = 0`: the score function has zero mean.
    #[test]
    fn score_function_has_zero_mean(seed in 0u64..1000) {
        let lm = small_lm(seed);
        let prefix = [Token::BOS, Token::THINK_OPEN];
        let p = next_token_distribution(&lm, &prefix).unwrap();
        let mut buf = GradBuffer::for_policy(&lm);
        let mut single = GradBuffer::for_policy(&lm);
        let mut scale = 0.0f64;
        for (t, &pt) in p.iter().enumerate() {
            let trace = lm.trace(&prefix, &[Token(t as u16)]).unwrap();
            lm.backward(&trace, &[pt], &mut buf);
            single.clear();
            lm.backward(&trace, &[1.0], &mut single);
            scale = scale.max(single.norm());
        }
        prop_assert!(buf.norm() <= 1e-9 * scale.max(1.0));
    }
}

#[test]
fn sampler_matches_its_distribution() {
    let vocab = Vocab::new(["x", "y"]).unwrap();
    let (x, y) = (vocab.token("x").unwrap(), vocab.token("y").unwrap());
    let example = Example::new("q", vec![x], vec![y]).unwrap();
    let prompt = cotlab::protocol::render_prompt(&example);
    let layout = TabularLayout {
        prompts: vec![prompt.clone()],
        cot_tokens: vec![x, y],
        answer_tokens: vec![y],
        cot_horizon: 1,
        answer_horizon: 1,
    };
    let mut policy = TabularPolicy::new(vocab, layout).unwrap();
    // support order: <answer>, x, y
    policy.set_logits(&prompt, &[0.3, -0.4, 1.1]).unwrap();
    let probs = next_token_distribution(&policy, &prompt).unwrap();
    let support = [Token::ANS_OPEN, x, y];
    let expected: Vec<f64> = support.iter().map(|t| probs[t.index()]).collect();

    let n = 30_000;
    let mut counts = [0usize; 3];
    let mut rng = Stream::new(1, "chi-square").rng();
    for _ in 0..n {
        let s = sample_continuation(&policy, &prompt, 1.0, 1, Token::ANS_OPEN, &mut rng).unwrap();
        let i = support.iter().position(|&t| t == s.tokens[0]).unwrap();
        counts[i] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(&expected)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new(2.0).unwrap().cdf(stat);
    assert!(p_value > 1e-3, "chi-square {stat:.2}, p = {p_value:.2e}, counts {counts:?}");
}
