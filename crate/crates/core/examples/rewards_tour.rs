//! Scores one group of four reference-answer likelihoods under every
//! reward, then shows the advantages the trainer would assign.
//!
//!     cargo run --example rewards_tour

use cotlab::advantages::{jepo_advantages, jepo_weights, rloo_advantages};
use cotlab::rewards::{direct_gradient_weights, jepo_group_reward, score_reward, AnswerScore, RewardVariant};

fn main() -> cotlab::Result<()> {
    // per-token log-probs of a two-token answer plus its closing tag
    let group = vec![
        AnswerScore::new(vec![-0.2, -0.4, -0.1])?,
        AnswerScore::new(vec![-1.5, -0.9, -0.3])?,
        AnswerScore::new(vec![-0.05, -0.1, -0.02])?,
        AnswerScore::new(vec![-3.0, -2.5, -0.8])?,
    ];
    let variants = [
        RewardVariant::Probability,
        RewardVariant::AvgProbability,
        RewardVariant::Logprob,
        RewardVariant::AvgLogprob,
    ];
    print!("{:>8}", "rollout");
    for v in variants {
        print!(" {:>16}", v.name());
    }
    println!();
    for (i, s) in group.iter().enumerate() {
        print!("{i:>8}");
        for v in variants {
            print!(" {:>16.5}", score_reward(v, s));
        }
        println!();
    }

    for v in variants {
        let rewards: Vec<f64> = group.iter().map(|s| score_reward(v, s)).collect();
        let adv = rloo_advantages(&rewards)?;
        println!("{:<16} leave-one-out advantages {:?}", v.name(), rounded(&adv));
    }
    println!(
        "group log-mean-exp {:.5}, advantages {:?}, weights {:?}",
        jepo_group_reward(&group)?,
        rounded(&jepo_advantages(&group)?),
        rounded(&jepo_weights(&group))
    );
    println!(
        "direct-term token weights for rollout 0 under avg_probability: {:?}",
        rounded(&direct_gradient_weights(RewardVariant::AvgProbability, &group[0], 0.0))
    );
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e5).round() / 1e5).collect()
}
