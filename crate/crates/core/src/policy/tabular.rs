use std::collections::BTreeMap;

use rand::Rng;

use super::{log_softmax_in_place, Decoder, GradBuffer, Policy, RecomputeDecoder, Segment};
use crate::error::{Error, Result};
use crate::protocol::{Token, Vocab};

/// Shape of the reachable context tree of a [`TabularPolicy`].
///
/// From each rendered prompt the policy emits up to `cot_horizon` CoT tokens
/// drawn from `cot_tokens` or `<answer>`, then (after `<answer>`, emitted or
/// forced) up to `answer_horizon` answer tokens or `</answer>`, plus one more
/// draw at each horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularLayout {
    pub prompts: Vec<Vec<Token>>,
    pub cot_tokens: Vec<Token>,
    pub answer_tokens: Vec<Token>,
    pub cot_horizon: usize,
    pub answer_horizon: usize,
}

#[derive(Clone, Debug)]
struct Entry {
    offset: usize,
    support: Vec<Token>,
}

/// Softmax policy with one free logit per (context, supported token).
#[derive(Clone, Debug)]
pub struct TabularPolicy {
    vocab: Vocab,
    index: BTreeMap<Vec<Token>, usize>,
    entries: Vec<Entry>,
    params: Vec<f64>,
    max_context: usize,
    layout: Option<TabularLayout>,
}

pub struct TabularTrace {
    logprobs: Vec<f64>,
    steps: Vec<TraceStep>,
}

struct TraceStep {
    entry: usize,
    target: Option<usize>,
    probs: Vec<f64>,
}

fn words(alphabet: &[Token], max_len: usize) -> Vec<Vec<Token>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * alphabet.len());
        for w in &frontier {
            for &t in alphabet {
                let mut n: Vec<Token> = w.clone();
                n.push(t);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn sorted_support(tokens: &[Token], extra: Token) -> Vec<Token> {
    let mut s: Vec<Token> = tokens.to_vec();
    s.push(extra);
    s.sort();
    s.dedup();
    s
}

impl TabularPolicy {
    /// All-zero logits (uniform over each context's support).
    pub fn from_contexts(vocab: Vocab, contexts: Vec<(Vec<Token>, Vec<Token>)>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut entries = Vec::with_capacity(contexts.len());
        let mut offset = 0;
        let mut max_context = 1;
        for (context, mut support) in contexts {
            support.sort();
            support.dedup();
            if support.is_empty() || support.iter().any(|&t| !vocab.contains(t)) {
                return Err(Error::InvalidArgument(
                    "tabular support must be a non-empty subset of the vocabulary".into(),
                ));
            }
            max_context = max_context.max(context.len() + 1);
            if index.insert(context, entries.len()).is_some() {
                return Err(Error::InvalidArgument("duplicate tabular context".into()));
            }
            let n = support.len();
            entries.push(Entry {
                offset,
                support,
            });
            offset += n;
        }
        Ok(TabularPolicy {
            vocab,
            index,
            entries,
            params: vec![0.0; offset],
            max_context,
            layout: None,
        })
    }

    pub fn new(vocab: Vocab, layout: TabularLayout) -> Result<Self> {
        let cot_support = sorted_support(&layout.cot_tokens, Token::ANS_OPEN);
        let ans_support = sorted_support(&layout.answer_tokens, Token::ANS_CLOSE);
        let cot_words = words(&layout.cot_tokens, layout.cot_horizon);
        let ans_words = words(&layout.answer_tokens, layout.answer_horizon);
        let mut contexts = Vec::new();
        for prompt in &layout.prompts {
            // the context at the horizon is never sampled from, but the
            // trainer scores the forced `<answer>` there with zero weight
            for z in &cot_words {
                let mut c = prompt.clone();
                c.extend(z);
                contexts.push((c, cot_support.clone()));
            }
            for z in &cot_words {
                for a in &ans_words {
                    let mut c = prompt.clone();
                    c.extend(z);
                    c.push(Token::ANS_OPEN);
                    c.extend(a);
                    contexts.push((c, ans_support.clone()));
                }
            }
        }
        let mut policy = Self::from_contexts(vocab, contexts)?;
        policy.layout = Some(layout);
        Ok(policy)
    }

    pub fn layout(&self) -> Option<&TabularLayout> {
        self.layout.as_ref()
    }

    /// Draws every logit uniformly from `[-scale, scale]`.
    pub fn randomize<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for p in &mut self.params {
            *p = rng.gen_range(-scale..=scale);
        }
    }

    pub fn num_contexts(&self) -> usize {
        self.entries.len()
    }

    /// Offset of the context's logits in the parameter vector and its support.
    pub fn context_slot(&self, context: &[Token]) -> Option<(usize, &[Token])> {
        self.index.get(context).map(|&i| {
            let e = &self.entries[i];
            (e.offset, e.support.as_slice())
        })
    }

    pub fn set_logits(&mut self, context: &[Token], logits: &[f64]) -> Result<()> {
        let (offset, support) = self
            .context_slot(context)
            .ok_or_else(|| Error::InvalidArgument("context not in table".into()))?;
        if logits.len() != support.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} logits, got {}",
                support.len(),
                logits.len()
            )));
        }
        self.params[offset..offset + logits.len()].copy_from_slice(logits);
        Ok(())
    }

    /// Makes `token` certain in `context` (other logits pushed to -1e3).
    pub fn set_certain(&mut self, context: &[Token], token: Token) -> Result<()> {
        let (_, support) = self
            .context_slot(context)
            .ok_or_else(|| Error::InvalidArgument("context not in table".into()))?;
        let logits: Vec<f64> = support
            .iter()
            .map(|&t| if t == token { 0.0 } else { -1e3 })
            .collect();
        self.set_logits(context, &logits)
    }

    fn entry_index(&self, context: &[Token]) -> Result<usize> {
        self.index.get(context).copied().ok_or_else(|| {
            if context.len() >= self.max_context {
                Error::ContextTooLong {
                    len: context.len(),
                    max: self.max_context,
                }
            } else {
                Error::InvalidArgument(format!(
                    "context of length {} is not in the tabular policy: {:?}",
                    context.len(),
                    context
                ))
            }
        })
    }

    fn support_logprobs(&self, e: &Entry) -> Vec<f64> {
        let mut row = self.params[e.offset..e.offset + e.support.len()].to_vec();
        log_softmax_in_place(&mut row);
        row
    }
}

impl Policy for TabularPolicy {
    type Trace = TabularTrace;

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn segments(&self) -> Vec<Segment> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| Segment::new(format!("ctx.{i}"), vec![e.support.len()]))
            .collect()
    }

    fn next_token_logprobs(&self, context: &[Token]) -> Result<Vec<f64>> {
        let e = &self.entries[self.entry_index(context)?];
        let mut out = vec![f64::NEG_INFINITY; self.vocab.size()];
        for (&t, lp) in e.support.iter().zip(self.support_logprobs(e)) {
            out[t.index()] = lp;
        }
        Ok(out)
    }

    fn trace(&self, prefix: &[Token], continuation: &[Token]) -> Result<TabularTrace> {
        let mut context = prefix.to_vec();
        let mut logprobs = Vec::with_capacity(continuation.len());
        let mut steps = Vec::with_capacity(continuation.len());
        for &tok in continuation {
            let entry_idx = self.entry_index(&context)?;
            let e = &self.entries[entry_idx];
            let lps = self.support_logprobs(e);
            let target = e.support.iter().position(|&t| t == tok);
            logprobs.push(target.map_or(f64::NEG_INFINITY, |j| lps[j]));
            steps.push(TraceStep {
                entry: entry_idx,
                target,
                probs: lps.iter().map(|v| v.exp()).collect(),
            });
            context.push(tok);
        }
        Ok(TabularTrace { logprobs, steps })
    }

    fn trace_logprobs<'t>(&self, trace: &'t TabularTrace) -> &'t [f64] {
        &trace.logprobs
    }

    fn backward(&self, trace: &TabularTrace, weights: &[f64], buffer: &mut GradBuffer) {
        for (step, &w) in trace.steps.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let off = self.entries[step.entry].offset;
            for (j, &p) in step.probs.iter().enumerate() {
                let onehot = if step.target == Some(j) { 1.0 } else { 0.0 };
                buffer.grad[off + j] += w * (onehot - p);
            }
        }
    }

    fn decoder(&self, prefix: &[Token]) -> Result<Box<dyn Decoder + '_>> {
        Ok(Box::new(RecomputeDecoder::new(self, prefix)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{accumulate_weighted_logprob_grad, next_token_distribution, score_continuation};

    fn two_token() -> (TabularPolicy, Token, Token) {
        let vocab = Vocab::new(["A", "B"]).unwrap();
        let (a, b) = (vocab.token("A").unwrap(), vocab.token("B").unwrap());
        let p = TabularPolicy::from_contexts(vocab, vec![(vec![Token::BOS], vec![a, b])]).unwrap();
        (p, a, b)
    }

    #[test]
    fn uniform_and_softmax() {
        let (mut p, _, _) = two_token();
        let d = next_token_distribution(&p, &[Token::BOS]).unwrap();
        assert_eq!(d.iter().filter(|&&x| x > 0.0).count(), 2);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        p.set_logits(&[Token::BOS], &[3f64.ln(), 0.0]).unwrap();
        let d = next_token_distribution(&p, &[Token::BOS]).unwrap();
        assert!((d[6] - 0.75).abs() < 1e-12 && (d[7] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn grad_of_uniform_two_token() {
        let (p, a, _) = two_token();
        let mut buf = GradBuffer::for_policy(&p);
        accumulate_weighted_logprob_grad(&p, &mut buf, &[Token::BOS], &[a], 1.0).unwrap();
        assert_eq!(buf.grad, vec![0.5, -0.5]);

        let mut buf = GradBuffer::for_policy(&p);
        accumulate_weighted_logprob_grad(&p, &mut buf, &[Token::BOS], &[a], 0.0).unwrap();
        assert_eq!(buf.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn layout_sizes() {
        let vocab = Vocab::new(["x", "y", "p", "q"]).unwrap();
        let t = |s| vocab.token(s).unwrap();
        let layout = TabularLayout {
            prompts: vec![vec![Token::BOS, t("x"), Token::THINK_OPEN]],
            cot_tokens: vec![t("x"), t("y")],
            answer_tokens: vec![t("p"), t("q")],
            cot_horizon: 3,
            answer_horizon: 2,
        };
        let p = TabularPolicy::new(vocab.clone(), layout).unwrap();
        // 15 CoT contexts + 15 answer starts x 7 answer contexts, 3 logits each
        assert_eq!(p.num_contexts(), 15 + 15 * 7);
        assert_eq!(p.num_params(), 3 * (15 + 105));
        let lp = score_continuation(
            &p,
            &[Token::BOS, t("x"), Token::THINK_OPEN],
            &[t("x"), Token::ANS_OPEN, t("p"), Token::ANS_CLOSE],
        )
        .unwrap();
        for v in lp {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }
}
