//! Acceptance suite. Each test checks one criterion and writes a single
//! `criterion N: PASS|FAIL ...` line to stderr (bypassing output capture),
//! then asserts the verdict.
//!
//! The training criteria share runs through a process-wide cache, so the
//! whole file takes about 30 minutes on one core.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use cotlab::advantages::rloo_advantages;
use cotlab::eval::{correlation_analysis, CorrelationReward, EvalConfig, LogRecord, MetricRecord};
use cotlab::experiment::{run_training, DataSpec, Method, ModelSpec, RunConfig, RunLog, RunOptions};
use cotlab::oracle::{answer_score, enumerate_rollouts, exact_answer_match_probability, SPACE_LIMIT};
use cotlab::policy::{Policy, TabularLayout, TabularPolicy, TinyLm};
use cotlab::protocol::{render_prompt, Example, Token, Vocab};
use cotlab::rewards::{
    calibrate_length_rate, logprob_reward, probability_reward, AnswerScore, LengthPenalty, RewardSpec, RewardVariant,
};
use cotlab::rng::Stream;
use cotlab::tasks::TaskSpec;
use cotlab::trainer::{rl_train_step, AdamW, GradientOptions, TrainConfig};
use cotlab::verify::{
    jensen_gaps, lemma_error, mc_ladder, narrow_instance, random_instance, random_scores, unbiasedness,
    PER_ROLLOUT_VARIANTS,
};

const SEEDS: [u64; 3] = [0, 1, 2];
const INSTANCE_SEED: u64 = 2024;

fn verdict(criterion: &str, pass: bool, detail: &str) {
    let line = format!("criterion {criterion}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).ok();
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------------------
// oracle criteria

#[test]
fn criterion_01_surrogate_gradient_matches_objective_gradient() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut shape_ok = true;
    for i in 0..5 {
        let inst = random_instance(INSTANCE_SEED, i).unwrap();
        shape_ok &= inst.policy.num_params() <= 500
            && inst.policy.vocab().ordinary_symbols().len() <= 4
            && inst.sampling.max_new <= 3;
        for v in PER_ROLLOUT_VARIANTS {
            let err = lemma_error(&inst, v, 2, 1e-4, &GradientOptions::default()).unwrap();
            worst = worst.max(err);
        }
    }
    let elapsed = start.elapsed();
    let pass = shape_ok && worst < 1e-3 && elapsed < Duration::from_secs(120);
    verdict(
        "1",
        pass,
        &format!("worst relative L2 error {worst:.2e} (< 1e-3) over 5 instances x 5 variants in {elapsed:.1?}"),
    );
}

#[test]
fn criterion_02_single_step_estimator_is_unbiased() {
    let start = Instant::now();
    let (mut coords, mut exceed, mut allowed, mut max_z) = (0, 0, 0, 0.0f64);
    let mut per_check_ok = true;
    for i in 0..5 {
        let inst = random_instance(INSTANCE_SEED, i).unwrap();
        for v in PER_ROLLOUT_VARIANTS {
            let s = unbiasedness(&inst, v, 4, 50_000, 7, &GradientOptions::default()).unwrap();
            per_check_ok &= s.exceedances <= s.allowed;
            coords += s.coordinates;
            exceed += s.exceedances;
            allowed += s.allowed;
            max_z = max_z.max(s.max_z);
        }
    }
    let elapsed = start.elapsed();
    let pass = per_check_ok && elapsed < Duration::from_secs(300);
    verdict(
        "2",
        pass,
        &format!(
            "{exceed} of {coords} coordinates beyond 3 SE (binomial allowance {allowed}), max z {max_z:.2}, 50k samples, {elapsed:.1?}"
        ),
    );
}

#[test]
fn criterion_03_probability_reward_is_answer_match_probability() {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for i in 0..8 {
        let inst = random_instance(INSTANCE_SEED, i).unwrap();
        assert!(inst.example.answer().len() <= 2);
        let rendered = render_prompt(&inst.example);
        for path in enumerate_rollouts(&inst.policy, &inst.example, false, &inst.sampling, SPACE_LIMIT).unwrap() {
            let score = answer_score(&inst.policy, &inst.example, &path.rollout).unwrap();
            let mut prefix = rendered.clone();
            prefix.extend_from_slice(&path.rollout.cot);
            prefix.push(Token::ANS_OPEN);
            let exact = exact_answer_match_probability(
                &inst.policy,
                &prefix,
                inst.example.answer(),
                inst.example.answer().len() + 1,
                SPACE_LIMIT,
            )
            .unwrap();
            worst = worst.max((probability_reward(&score) - exact).abs());
            cases += 1;
        }
    }
    verdict("3", worst <= 1e-12, &format!("max deviation {worst:.2e} (<= 1e-12) over {cases} CoT prefixes"));
}

#[test]
fn criterion_04_group_log_mean_exp_bounds_the_mean() {
    let (min_gap, max_equal) = jensen_gaps(10_000, 11).unwrap();
    let pass = min_gap > 0.0 && max_equal <= 1e-12;
    verdict(
        "4",
        pass,
        &format!("smallest gap on distinct groups {min_gap:.2e} (> 0), largest |gap| on equal groups {max_equal:.2e}"),
    );
}

#[test]
fn criterion_05_monte_carlo_estimates_increase_with_samples() {
    let mut worst = f64::INFINITY;
    let mut ok = true;
    for i in 0..6 {
        let ladder = mc_ladder(&narrow_instance(INSTANCE_SEED, i).unwrap()).unwrap();
        for w in ladder.windows(2) {
            let gap = w[1] - w[0];
            ok &= gap >= -1e-9;
            worst = worst.min(gap);
        }
    }
    verdict("5", ok, &format!("smallest adjacent gap (MC1, MC4, MC32, exact) {worst:.2e} (>= -1e-9) on 6 instances"));
}

fn tiny_batch() -> (TinyLm, Vec<Example>) {
    let model = TinyLm::new(Default::default(), Vocab::builtin(), 3).unwrap();
    let batch = TaskSpec::modsum(4, 5, 3, 10).generate().unwrap();
    (model, batch)
}

#[test]
fn criterion_06_leave_one_out_algebra() {
    let mut rng = Stream::new(6, "rloo").rng();
    let (mut max_sum, mut max_shift) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let g = rng.gen_range(2..=16);
        let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let c = rng.gen_range(-1000.0..1000.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
        let a = rloo_advantages(&rewards).unwrap();
        let b = rloo_advantages(&shifted).unwrap();
        max_sum = max_sum.max(a.iter().sum::<f64>().abs());
        max_shift = max_shift.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }

    let mut max_update = 0.0f64;
    for variant in [RewardVariant::Logprob, RewardVariant::Probability, RewardVariant::BinaryVerifier] {
        let mut config = TrainConfig::new(RewardSpec::new(variant), 10);
        config.group_size = 4;
        config.sampling.max_new = 8;
        let (base, batch) = tiny_batch();
        let mut updated = Vec::new();
        for shift in [0.0, 37.5] {
            let mut model = base.clone();
            let mut opt = AdamW::new(config.optimizer.clone(), model.num_params());
            let options = GradientOptions {
                reward_shift: shift,
                ..Default::default()
            };
            rl_train_step(&mut model, None, &batch, &config, 1, &mut opt, &options).unwrap();
            updated.push(model.params().to_vec());
        }
        let d = updated[0].iter().zip(&updated[1]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        max_update = max_update.max(d);
    }
    let pass = max_sum <= 1e-9 && max_shift <= 1e-9 && max_update <= 1e-9;
    verdict(
        "6",
        pass,
        &format!(
            "max |sum| {max_sum:.2e}, max shift change {max_shift:.2e}, max parameter difference after a shifted step {max_update:.2e} (all <= 1e-9)"
        ),
    );
}

// ---------------------------------------------------------------------------
// training runs, cached per process

type RunCache = Mutex<HashMap<String, Arc<Finished>>>;

struct Finished {
    log: RunLog,
    elapsed: Duration,
}

fn cache() -> &'static RunCache {
    static CACHE: OnceLock<RunCache> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn scratch_root() -> &'static Path {
    static ROOT: OnceLock<tempfile::TempDir> = OnceLock::new();
    ROOT.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

/// Runs `config` once per process; later calls with the same key reuse the log.
fn cached_run(key: &str, config: &RunConfig) -> Arc<Finished> {
    let mut guard = cache().lock().unwrap_or_else(|e| e.into_inner());
    if let Some(f) = guard.get(key) {
        return f.clone();
    }
    let start = Instant::now();
    let log = run_training(config, &scratch_root().join(key), &RunOptions::default()).unwrap();
    let finished = Arc::new(Finished {
        log,
        elapsed: start.elapsed(),
    });
    guard.insert(key.to_string(), finished.clone());
    finished
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Arm {
    Rl(RewardVariant),
    Sft,
}

impl Arm {
    fn name(self) -> &'static str {
        match self {
            Arm::Rl(v) => v.name(),
            Arm::Sft => "sft",
        }
    }
}

fn base_config(data: TaskSpec, arm: Arm, seed: u64, steps: usize) -> RunConfig {
    let variant = match arm {
        Arm::Rl(v) => v,
        Arm::Sft => RewardVariant::Logprob,
    };
    let mut train = TrainConfig::new(RewardSpec::new(variant), steps);
    train.seed = seed;
    train.learning_rate = 1e-3;
    RunConfig {
        model: ModelSpec {
            tiny_lm: Default::default(),
            init_seed: seed,
            checkpoint: None,
        },
        data: DataSpec::Generate(data),
        val_fraction: 0.1,
        split_seed: 0,
        method: if arm == Arm::Sft { Method::Sft } else { Method::Rl },
        train,
        eval: EvalConfig::new(32, seed),
        eval_examples: 100,
    }
}

const MODSUM_STEPS: usize = 500;

fn modsum_config(arm: Arm, seed: u64) -> RunConfig {
    // 2200 examples with 200 held out leaves exactly 2000 for training
    let mut c = base_config(TaskSpec::modsum(2200, 7, 3, 10), arm, seed, MODSUM_STEPS);
    c.val_fraction = 200.0 / 2200.0;
    c.train.eval_every = MODSUM_STEPS;
    c.train.sampling.max_new = 16;
    c.eval = EvalConfig::new(16, seed);
    c.eval_examples = 200;
    c
}

fn modsum_run(arm: Arm, seed: u64) -> Arc<Finished> {
    cached_run(&format!("modsum-{}-{seed}", arm.name()), &modsum_config(arm, seed))
}

const LT_STEPS: usize = 600;

fn longtransform_config(arm: Arm, seed: u64, penalty: Option<LengthPenalty>) -> RunConfig {
    let mut c = base_config(TaskSpec::longtransform(2000, 11, 4), arm, seed, LT_STEPS);
    c.train.eval_every = 50;
    c.train.sampling.max_new = 32;
    c.train.reward.length_penalty = penalty;
    c
}

fn longtransform_run(arm: Arm, seed: u64) -> Arc<Finished> {
    cached_run(&format!("lt-{}-{seed}", arm.name()), &longtransform_config(arm, seed, None))
}

fn first_eval(log: &RunLog) -> &MetricRecord {
    log.evals().next().expect("step-0 evaluation")
}

fn last_eval(log: &RunLog) -> &MetricRecord {
    log.last_eval().expect("final evaluation")
}

// ---------------------------------------------------------------------------
// trend criteria

const RL_VARIANTS: [RewardVariant; 6] = RewardVariant::ALL;

#[test]
fn criterion_07_verifiable_task_trends() {
    let mut lines = Vec::new();
    let (mut lift_ok, mut ppl_ok, mut time_ok) = (true, true, true);
    for seed in SEEDS {
        let mut ppl = HashMap::new();
        for arm in RL_VARIANTS.map(Arm::Rl).into_iter().chain([Arm::Sft]) {
            let run = modsum_run(arm, seed);
            time_ok &= run.elapsed < Duration::from_secs(1800);
            let (init, fin) = (first_eval(&run.log), last_eval(&run.log));
            if arm != Arm::Sft {
                let lifted = fin.greedy_success > init.greedy_success && fin.greedy_success >= 5.0 * init.greedy_success;
                lift_ok &= lifted;
                if !lifted {
                    lines.push(format!(
                        "seed {seed} {}: greedy {:.3} -> {:.3}",
                        arm.name(),
                        init.greedy_success,
                        fin.greedy_success
                    ));
                }
            }
            ppl.insert(arm.name(), fin.perplexity);
        }
        let (lp, sft, base) = (ppl["logprob"], ppl["sft"], ppl["binary_verifier"]);
        let ok = lp <= 1.3 * sft && base >= 2.0 * lp;
        ppl_ok &= ok;
        lines.push(format!(
            "seed {seed}: perplexity logprob {lp:.2} / sft {sft:.2} = {:.2} (<= 1.3), binary {base:.2} / logprob = {:.2} (>= 2)",
            lp / sft,
            base / lp
        ));
    }
    verdict("7a", lift_ok && time_ok, "every RL variant lifts greedy success >= 5x above step 0 on all seeds");
    for l in &lines {
        std::io::stderr().write_all(format!("    {l}\n").as_bytes()).ok();
    }
    verdict("7b", ppl_ok, "final perplexity ordering on all seeds");
}

#[test]
fn criterion_08_non_verifiable_task_trends() {
    let (mut flat_ok, mut match_ok, mut collapse_ok) = (true, true, true);
    let mut detail = Vec::new();
    for seed in SEEDS {
        let lp = longtransform_run(Arm::Rl(RewardVariant::Logprob), seed);
        let pr = longtransform_run(Arm::Rl(RewardVariant::Probability), seed);
        let sft = longtransform_run(Arm::Sft, seed);
        let gain = |f: &Finished| last_eval(&f.log).per_answer_logprob_mc1 - first_eval(&f.log).per_answer_logprob_mc1;
        let (g_lp, g_pr) = (gain(&lp), gain(&pr));
        flat_ok &= g_lp > 0.0 && g_pr < 0.1 * g_lp;

        let (f_lp, f_sft) = (last_eval(&lp.log).per_answer_logprob_mc1, last_eval(&sft.log).per_answer_logprob_mc1);
        match_ok &= (f_lp - f_sft).abs() <= 0.05 * f_sft.abs();

        let l0 = first_eval(&lp.log).mean_cot_length;
        let tail: Vec<f64> = lp
            .log
            .evals()
            .filter(|m| 3 * m.step >= 2 * LT_STEPS)
            .map(|m| m.mean_cot_length)
            .collect();
        let tail_max = tail.iter().copied().fold(0.0, f64::max);
        collapse_ok &= !tail.is_empty() && tail_max < 0.25 * l0;
        detail.push(format!(
            "seed {seed}: gain probability {g_pr:.3} vs logprob {g_lp:.3}; final logprob {f_lp:.3} vs sft {f_sft:.3} ({:.1}% gap); CoT length {l0:.2} -> max {tail_max:.2} over the last third",
            100.0 * (f_lp - f_sft).abs() / f_sft.abs()
        ));
    }
    for l in &detail {
        std::io::stderr().write_all(format!("    {l}\n").as_bytes()).ok();
    }
    let all = flat_ok && match_ok && collapse_ok;
    let line = |name: &str, ok: bool, what: &str| {
        let s = format!("criterion {name}: {} {what}\n", if ok { "PASS" } else { "FAIL" });
        std::io::stderr().write_all(s.as_bytes()).ok();
    };
    line("8a", flat_ok, "probability reward improves < 10% of the logprob improvement");
    line("8b", match_ok, "logprob final per-answer logprob within 5% of sft");
    line("8c", collapse_ok, "logprob CoT length < 25% of step 0 over the last third");
    assert!(all, "criterion 8 failed: {detail:?}");
}

/// Mean of a train-record field over the five steps starting at `from`.
fn window_mean(log: &RunLog, from: usize, field: impl Fn(&cotlab::trainer::StepReport) -> f64) -> f64 {
    let v: Vec<f64> = log.steps().filter(|s| s.step >= from && s.step < from + 5).map(field).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_09_length_penalty_keeps_the_cot() {
    let mut ok = true;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let base = longtransform_run(Arm::Rl(RewardVariant::Logprob), seed);
        let l0 = first_eval(&base.log).mean_cot_length;
        // step s's rollouts come from the model after s - 1 updates
        let (r0, r40) = (
            window_mean(&base.log, 1, |s| s.mean_reward),
            window_mean(&base.log, 41, |s| s.mean_reward),
        );
        let (len0, len40) = (
            window_mean(&base.log, 1, |s| s.mean_cot_length),
            window_mean(&base.log, 41, |s| s.mean_cot_length),
        );
        match calibrate_length_rate(r40 - r0, len0 - len40) {
            Ok(rate) => {
                let penalty = LengthPenalty {
                    rate: rate.max(0.0),
                    threshold: l0,
                };
                let config = longtransform_config(Arm::Rl(RewardVariant::Logprob), seed, Some(penalty));
                let run = cached_run(&format!("lt-penalized-{seed}"), &config);
                let fin = last_eval(&run.log).mean_cot_length;
                ok &= fin >= 0.6 * l0;
                detail.push(format!("seed {seed}: rate {rate:.4}, final length {fin:.2} vs 0.6 x {l0:.2}"));
            }
            Err(e) => {
                ok = false;
                detail.push(format!(
                    "seed {seed}: no rate ({e}); CoT length went {len0:.2} -> {len40:.2} over the calibration window"
                ));
            }
        }
    }
    for l in &detail {
        std::io::stderr().write_all(format!("    {l}\n").as_bytes()).ok();
    }
    verdict("9", ok, "penalized logprob runs keep final CoT length >= 0.6 x step 0");
}

fn direct_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Two questions: one with short CoTs and low answer likelihood, one with
/// long CoTs and high likelihood; within each, longer is worse.
fn simpson_policy() -> (TabularPolicy, Vec<Example>) {
    let vocab = Vocab::new(["x", "y", "p"]).unwrap();
    let t = |s: &str| vocab.token(s).unwrap();
    let q1 = Example::new("short", vec![t("x")], vec![t("p")]).unwrap();
    let q2 = Example::new("long", vec![t("y")], vec![t("p")]).unwrap();
    let layout = TabularLayout {
        prompts: vec![render_prompt(&q1), render_prompt(&q2)],
        cot_tokens: vec![t("x")],
        answer_tokens: vec![t("p")],
        cot_horizon: 3,
        answer_horizon: 1,
    };
    let x = t("x");
    let p = t("p");
    let mut policy = TabularPolicy::new(vocab, layout).unwrap();
    let ctx = |q: &Example, cot: usize, tail: &[Token]| {
        let mut c = render_prompt(q);
        c.extend(std::iter::repeat(x).take(cot));
        c.extend_from_slice(tail);
        c
    };
    // lengths 0 or 1 for the first question, 2 or 3 for the second
    policy.set_certain(&ctx(&q1, 1, &[]), Token::ANS_OPEN).unwrap();
    policy.set_certain(&ctx(&q2, 0, &[]), x).unwrap();
    policy.set_certain(&ctx(&q2, 1, &[]), x).unwrap();
    // support order is [</answer>, p]; the logit of p sets the likelihood
    for (q, len, logit) in [(&q1, 0, 0.0), (&q1, 1, -1.5), (&q2, 2, 3.0), (&q2, 3, 1.5)] {
        policy.set_logits(&ctx(q, len, &[Token::ANS_OPEN]), &[0.0, logit]).unwrap();
        policy.set_certain(&ctx(q, len, &[Token::ANS_OPEN, p]), Token::ANS_CLOSE).unwrap();
    }
    (policy, vec![q1, q2])
}

#[test]
fn criterion_10_correlation_methodology() {
    let (policy, questions) = simpson_policy();
    let config = EvalConfig::new(3, 10);
    let rep = correlation_analysis(&policy, &questions, 40, CorrelationReward::Logprob, &config).unwrap();
    let (mut xs, mut ys, mut locals) = (Vec::new(), Vec::new(), Vec::new());
    for q in &rep.questions {
        xs.extend_from_slice(&q.cot_lengths);
        ys.extend_from_slice(&q.rewards);
        locals.push(direct_pearson(&q.cot_lengths, &q.rewards));
    }
    let global = direct_pearson(&xs, &ys);
    let mean_local = locals.iter().sum::<f64>() / locals.len() as f64;
    let reported = rep.global.unwrap_or(f64::NAN);
    let fixture_ok = reported > 0.0
        && rep.mean_local < 0.0
        && rep.skipped == 0
        && close(reported, global, 1e-9)
        && close(rep.mean_local, mean_local, 1e-9);
    verdict(
        "10a",
        fixture_ok,
        &format!(
            "fixture global r {reported:.6} (direct {global:.6}), mean local r {:.6} (direct {mean_local:.6})",
            rep.mean_local
        ),
    );

    let mut negative = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let c = longtransform_config(Arm::Rl(RewardVariant::Logprob), seed, None);
        let model = c.initial_model().unwrap();
        let (_, mut val) = c.datasets(&Vocab::builtin()).unwrap();
        val.shuffle(&mut Stream::new(seed, "correlate-questions").rng());
        val.truncate(60);
        let r = correlation_analysis(&model, &val, 16, CorrelationReward::Logprob, &EvalConfig::new(32, seed)).unwrap();
        if r.mean_local < 0.0 {
            negative += 1;
        }
        detail.push(format!("seed {seed}: mean local r {:.3}, global r {:.3}", r.mean_local, r.global.unwrap_or(f64::NAN)));
    }
    for l in &detail {
        std::io::stderr().write_all(format!("    {l}\n").as_bytes()).ok();
    }
    verdict("10b", negative >= 2, &format!("step-0 mean local correlation negative in {negative} of 3 seeds (need 2)"));
}

// ---------------------------------------------------------------------------
// identities and reproducibility

fn cotlab(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cotlab")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "cotlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn short_run_config(dir: &Path) -> PathBuf {
    let mut c = base_config(TaskSpec::modsum(500, 3, 3, 10), Arm::Rl(RewardVariant::Logprob), 4, 200);
    c.train.group_size = 4;
    c.train.questions_per_step = 4;
    c.train.sampling.max_new = 16;
    c.train.eval_every = 100;
    c.eval = EvalConfig::new(16, 4);
    c.eval_examples = 40;
    let path = dir.join("config.json");
    std::fs::write(&path, c.to_json()).unwrap();
    path
}

fn all_metric_records(logs: &[&RunLog]) -> Vec<MetricRecord> {
    logs.iter().flat_map(|l| l.evals().cloned()).collect()
}

#[test]
fn criterion_11_identities_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_run_config(dir.path());
    let config = config.to_str().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", config, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        cotlab(&args);
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    let same_run = read(&a.join("metrics.jsonl")) == read(&b.join("metrics.jsonl"))
        && read(&a.join("final/params.bin")) == read(&b.join("final/params.bin"));

    let resume_from = a.join("checkpoints/step-000100");
    let c = run("c", &["--resume", resume_from.to_str().unwrap()]);
    let full = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = full.lines().collect();
    let cut = lines
        .iter()
        .position(|l| matches!(serde_json::from_str(l).unwrap(), LogRecord::Eval(m) if m.step == 100))
        .unwrap();
    let tail = lines[cut + 1..].join("\n") + "\n";
    let resumed = std::fs::read_to_string(c.join("metrics.jsonl")).unwrap();
    let same_resume = resumed == tail && read(&a.join("final/params.bin")) == read(&c.join("final/params.bin"));

    // every metric record this process emitted, including the trend runs
    let short = cotlab::experiment::read_metrics(&a.join("metrics.jsonl")).unwrap();
    let short_log = RunLog { records: short };
    let mut finished: Vec<Arc<Finished>> = Vec::new();
    for seed in SEEDS {
        for arm in RL_VARIANTS.map(Arm::Rl).into_iter().chain([Arm::Sft]) {
            finished.push(modsum_run(arm, seed));
        }
        for arm in [Arm::Rl(RewardVariant::Logprob), Arm::Rl(RewardVariant::Probability), Arm::Sft] {
            finished.push(longtransform_run(arm, seed));
        }
    }
    let extra: Vec<Arc<Finished>> = cache().lock().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
    let mut logs: Vec<&RunLog> = finished.iter().chain(&extra).map(|f| &f.log).collect();
    logs.push(&short_log);
    let records = all_metric_records(&logs);
    let worst_ppl = records
        .iter()
        .map(|m| ((-m.per_answer_logprob_mc1).exp() - m.perplexity).abs() / m.perplexity)
        .fold(0.0, f64::max);

    let mut rng = Stream::new(11, "ln-identity").rng();
    let mut worst_ln = 0.0f64;
    for _ in 0..10_000 {
        let flat = rng.gen_bool(0.5);
        for score in random_scores(&mut rng, flat) {
            worst_ln = worst_ln.max((logprob_reward(&score) - probability_reward(&score).ln()).abs());
        }
    }
    let len = rng.gen_range(1..30);
    let long = AnswerScore::new((0..len).map(|_| -rng.gen_range(0.0..3.0)).collect()).unwrap();
    worst_ln = worst_ln.max((logprob_reward(&long) - probability_reward(&long).ln()).abs());

    let pass = same_run && same_resume && worst_ppl <= 1e-12 && worst_ln <= 1e-12;
    verdict(
        "11",
        pass,
        &format!(
            "perplexity identity worst relative error {worst_ppl:.1e} over {} records; ln identity worst {worst_ln:.1e}; repeat run identical: {same_run}; resume from step 100 identical: {same_resume}",
            records.len()
        ),
    );
}
