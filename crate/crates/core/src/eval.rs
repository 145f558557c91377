//! Success, likelihood, length and correlation metrics.
//!
//! CoTs are always sampled at temperature 1 from a dedicated stream
//! `seed / "eval" / example id / sample index`, independent of the training
//! step, so successive evaluations of a run share their random numbers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{greedy_continuation, sample_continuation, score_continuation, Policy};
use crate::protocol::{render_prompt, Example, Token};
use crate::rng::Stream;
use crate::stats::{log_mean_exp, pearson, wilson_half_width};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new: usize,
    #[serde(default = "default_max_answer")]
    pub max_answer: usize,
    /// CoT samples per example; MC-32 fields are filled when this is 32 or more.
    #[serde(default = "default_mc")]
    pub mc: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_answer() -> usize {
    40
}

fn default_mc() -> usize {
    1
}

impl EvalConfig {
    pub fn new(max_new: usize, seed: u64) -> Self {
        EvalConfig {
            max_new,
            max_answer: default_max_answer(),
            mc: 1,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    PerToken,
    PerAnswer,
}

/// One evaluation snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub greedy_success: f64,
    pub sampled_success_t1: f64,
    /// Half-width of the 95% Wilson interval of `sampled_success_t1`.
    pub sampled_success_half_width: f64,
    pub success_expectation: f64,
    pub per_token_logprob_mc1: f64,
    pub per_answer_logprob_mc1: f64,
    pub per_token_logprob_mc32: Option<f64>,
    pub per_answer_logprob_mc32: Option<f64>,
    pub perplexity: f64,
    pub mean_cot_length: f64,
    pub n_examples: usize,
    pub n_cot_samples: usize,
}

/// A line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Train(crate::trainer::StepReport),
    Eval(MetricRecord),
}

fn cot_stream(seed: u64, example: &Example, index: usize) -> Stream {
    Stream::new(seed, "eval").with(example.id()).with_index(index as u64)
}

/// A CoT sampled at temperature 1: tokens before `<answer>`, or the whole
/// budget when `<answer>` never came.
pub fn sample_cot<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    max_new: usize,
    stream: &Stream,
) -> Result<Vec<Token>> {
    let s = sample_continuation(model, &render_prompt(example), 1.0, max_new, Token::ANS_OPEN, &mut stream.rng())?;
    let mut cot = s.tokens;
    if !s.truncated {
        cot.pop();
    }
    Ok(cot)
}

fn answer_prefix(example: &Example, cot: &[Token]) -> Vec<Token> {
    let mut p = render_prompt(example);
    p.extend_from_slice(cot);
    p.push(Token::ANS_OPEN);
    p
}

/// `log π(a* ++ [</answer>] | prompt, cot)`.
pub fn answer_logprob<P: Policy + ?Sized>(model: &P, example: &Example, cot: &[Token]) -> Result<f64> {
    Ok(score_continuation(model, &answer_prefix(example, cot), &example.answer_target())?
        .iter()
        .sum())
}

fn greedy_correct<P: Policy + ?Sized>(model: &P, example: &Example, cot: &[Token], max_answer: usize) -> Result<bool> {
    let (tokens, truncated) = greedy_continuation(model, &answer_prefix(example, cot), max_answer, Token::ANS_CLOSE)?;
    Ok(!truncated && tokens[..tokens.len() - 1] == *example.answer())
}

fn sampled_correct<P: Policy + ?Sized>(
    model: &P,
    example: &Example,
    cot: &[Token],
    max_answer: usize,
    seed: u64,
) -> Result<bool> {
    let mut rng = Stream::new(seed, "eval-answer").with(example.id()).rng();
    let s = sample_continuation(model, &answer_prefix(example, cot), 1.0, max_answer, Token::ANS_CLOSE, &mut rng)?;
    Ok(!s.truncated && s.tokens[..s.tokens.len() - 1] == *example.answer())
}

fn check_nonempty(examples: &[Example]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one example".into()));
    }
    Ok(())
}

fn per_example<P, T, F>(model: &P, examples: &[Example], config: &EvalConfig, f: F) -> Result<Vec<T>>
where
    P: Policy + ?Sized,
    T: Send,
    F: Fn(&Example, Vec<Token>) -> Result<T> + Sync,
{
    check_nonempty(examples)?;
    examples
        .par_iter()
        .map(|e| f(e, sample_cot(model, e, config.max_new, &cot_stream(config.seed, e, 0))?))
        .collect()
}

/// Fraction of examples whose greedily decoded answer after a sampled CoT
/// equals the reference.
pub fn greedy_success<P: Policy + ?Sized>(model: &P, examples: &[Example], config: &EvalConfig) -> Result<f64> {
    let hits = per_example(model, examples, config, |e, cot| greedy_correct(model, e, &cot, config.max_answer))?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

/// Sampled-answer success rate with its Wilson half-width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuccessEstimate {
    pub rate: f64,
    pub half_width: f64,
}

pub fn sampled_success<P: Policy + ?Sized>(
    model: &P,
    examples: &[Example],
    config: &EvalConfig,
) -> Result<SuccessEstimate> {
    let hits = per_example(model, examples, config, |e, cot| {
        sampled_correct(model, e, &cot, config.max_answer, config.seed)
    })?;
    let k = hits.iter().filter(|&&h| h).count();
    Ok(SuccessEstimate {
        rate: k as f64 / examples.len() as f64,
        half_width: wilson_half_width(k, examples.len()),
    })
}

/// Mean of `π(a* | p, z)` with one sampled CoT per example.
pub fn success_rate_expectation<P: Policy + ?Sized>(
    model: &P,
    examples: &[Example],
    config: &EvalConfig,
) -> Result<f64> {
    let probs = per_example(model, examples, config, |e, cot| Ok(answer_logprob(model, e, &cot)?.exp()))?;
    Ok(probs.iter().sum::<f64>() / examples.len() as f64)
}

pub fn mean_cot_length<P: Policy + ?Sized>(model: &P, examples: &[Example], config: &EvalConfig) -> Result<f64> {
    let lens = per_example(model, examples, config, |_, cot| Ok(cot.len() as f64))?;
    Ok(lens.iter().sum::<f64>() / examples.len() as f64)
}

/// Combines per-example `ln((1/N) Σ_i π(a*|p,z_i))` values.
pub fn aggregate_logprob(values: &[f64], answer_lens: &[usize], averaging: Averaging) -> f64 {
    match averaging {
        Averaging::PerAnswer => {
            values
                .iter()
                .zip(answer_lens)
                .map(|(v, &n)| v / n as f64)
                .sum::<f64>()
                / values.len() as f64
        }
        Averaging::PerToken => values.iter().sum::<f64>() / answer_lens.iter().sum::<usize>() as f64,
    }
}

/// logprob-MC`n`: per example, the log of the mean answer probability over
/// `n` sampled CoTs, then averaged per token or per answer.
pub fn logprob_mc<P: Policy + ?Sized>(
    model: &P,
    examples: &[Example],
    n: usize,
    averaging: Averaging,
    config: &EvalConfig,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("logprob-MC needs at least one sample".into()));
    }
    check_nonempty(examples)?;
    let values = examples
        .par_iter()
        .map(|e| {
            let lps = (0..n)
                .map(|i| {
                    let cot = sample_cot(model, e, config.max_new, &cot_stream(config.seed, e, i))?;
                    answer_logprob(model, e, &cot)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(log_mean_exp(&lps))
        })
        .collect::<Result<Vec<f64>>>()?;
    let lens: Vec<usize> = examples.iter().map(|e| e.answer().len()).collect();
    Ok(aggregate_logprob(&values, &lens, averaging))
}

pub fn perplexity(per_answer_logprob_mc1: f64) -> f64 {
    (-per_answer_logprob_mc1).exp()
}

struct ExampleEval {
    greedy: bool,
    sampled: bool,
    prob: f64,
    mc1: f64,
    mc32: Option<f64>,
    cot_len: f64,
}

/// The full metric suite in one pass. With `config.mc = N`, every example
/// draws `N` CoTs; the MC-1 value is the mean of the `N` single-CoT
/// log-likelihoods, and MC-32 fields are filled when `N >= 32` using the
/// first 32. Success and length metrics use the first CoT.
pub fn evaluate<P: Policy + ?Sized>(
    model: &P,
    examples: &[Example],
    config: &EvalConfig,
    step: usize,
) -> Result<MetricRecord> {
    check_nonempty(examples)?;
    let n = config.mc.max(1);
    let rows = examples
        .par_iter()
        .map(|e| {
            let mut lps = Vec::with_capacity(n);
            let mut first = None;
            for i in 0..n {
                let cot = sample_cot(model, e, config.max_new, &cot_stream(config.seed, e, i))?;
                lps.push(answer_logprob(model, e, &cot)?);
                if i == 0 {
                    first = Some(cot);
                }
            }
            let cot = first.expect("at least one sample");
            Ok(ExampleEval {
                greedy: greedy_correct(model, e, &cot, config.max_answer)?,
                sampled: sampled_correct(model, e, &cot, config.max_answer, config.seed)?,
                prob: lps[0].exp(),
                mc1: lps.iter().sum::<f64>() / n as f64,
                mc32: (n >= 32).then(|| log_mean_exp(&lps[..32])),
                cot_len: cot.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = examples.len() as f64;
    let lens: Vec<usize> = examples.iter().map(|e| e.answer().len()).collect();
    let mc1: Vec<f64> = rows.iter().map(|r| r.mc1).collect();
    let mc32: Option<Vec<f64>> = rows.iter().map(|r| r.mc32).collect();
    let sampled_hits = rows.iter().filter(|r| r.sampled).count();
    let per_answer_mc1 = aggregate_logprob(&mc1, &lens, Averaging::PerAnswer);
    Ok(MetricRecord {
        step,
        greedy_success: rows.iter().filter(|r| r.greedy).count() as f64 / m,
        sampled_success_t1: sampled_hits as f64 / m,
        sampled_success_half_width: wilson_half_width(sampled_hits, examples.len()),
        success_expectation: rows.iter().map(|r| r.prob).sum::<f64>() / m,
        per_token_logprob_mc1: aggregate_logprob(&mc1, &lens, Averaging::PerToken),
        per_answer_logprob_mc1: per_answer_mc1,
        per_token_logprob_mc32: mc32.as_ref().map(|v| aggregate_logprob(v, &lens, Averaging::PerToken)),
        per_answer_logprob_mc32: mc32.as_ref().map(|v| aggregate_logprob(v, &lens, Averaging::PerAnswer)),
        perplexity: perplexity(per_answer_mc1),
        mean_cot_length: rows.iter().map(|r| r.cot_len).sum::<f64>() / m,
        n_examples: examples.len(),
        n_cot_samples: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationReward {
    Logprob,
    Probability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionCorrelation {
    pub id: String,
    /// `None` when CoT length or reward has zero variance.
    pub r: Option<f64>,
    pub skipped: bool,
    pub n: usize,
    /// The sampled points: CoT lengths and the matching rewards.
    pub cot_lengths: Vec<f64>,
    pub rewards: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Pearson over all pooled points.
    pub global: Option<f64>,
    /// Mean of the per-question Pearson values that are defined.
    pub mean_local: f64,
    pub questions: Vec<QuestionCorrelation>,
    pub skipped: usize,
}

/// Global and mean local Pearson correlation of `(x, y)` points grouped by
/// question.
pub fn correlate_groups(groups: &[(String, Vec<f64>, Vec<f64>)]) -> Result<CorrelationReport> {
    let mut questions = Vec::with_capacity(groups.len());
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut locals = Vec::new();
    for (id, x, y) in groups {
        xs.extend_from_slice(x);
        ys.extend_from_slice(y);
        let r = pearson(x, y);
        if let Some(r) = r {
            locals.push(r);
        }
        questions.push(QuestionCorrelation {
            id: id.clone(),
            r,
            skipped: r.is_none(),
            n: x.len(),
            cot_lengths: x.clone(),
            rewards: y.clone(),
        });
    }
    if locals.is_empty() {
        return Err(Error::AllDegenerate);
    }
    Ok(CorrelationReport {
        global: pearson(&xs, &ys),
        mean_local: locals.iter().sum::<f64>() / locals.len() as f64,
        skipped: questions.iter().filter(|q| q.skipped).count(),
        questions,
    })
}

/// Samples `samples_per_question` CoTs per question and correlates CoT
/// length with the chosen reward of the reference answer.
pub fn correlation_analysis<P: Policy + ?Sized>(
    model: &P,
    questions: &[Example],
    samples_per_question: usize,
    reward: CorrelationReward,
    config: &EvalConfig,
) -> Result<CorrelationReport> {
    if questions.len() < 2 || samples_per_question < 3 {
        return Err(Error::InvalidArgument(
            "correlation needs at least 2 questions and 3 samples per question".into(),
        ));
    }
    let groups = questions
        .par_iter()
        .map(|e| {
            let (mut x, mut y) = (Vec::new(), Vec::new());
            for i in 0..samples_per_question {
                let stream = Stream::new(config.seed, "correlate").with(e.id()).with_index(i as u64);
                let cot = sample_cot(model, e, config.max_new, &stream)?;
                let lp = answer_logprob(model, e, &cot)?;
                x.push(cot.len() as f64);
                y.push(match reward {
                    CorrelationReward::Logprob => lp,
                    CorrelationReward::Probability => lp.exp(),
                });
            }
            Ok((e.id().to_string(), x, y))
        })
        .collect::<Result<Vec<_>>>()?;
    correlate_groups(&groups)
}
