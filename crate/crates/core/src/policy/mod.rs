//! Autoregressive policies.
//!
//! Two implementations share the [`Policy`] trait: [`TabularPolicy`], whose
//! reachable contexts can be enumerated exactly, and [`TinyLm`], a small
//! decoder-only transformer with a hand-written backward pass.
//!
//! All probability math stays in log space. A teacher-forced pass produces a
//! trace holding the per-token log-probabilities; [`Policy::backward`] then
//! adds `Σ_i w_i ∇ log π(c_i | prefix ++ c[..i])` to a [`GradBuffer`].

mod checkpoint;
mod tabular;
mod tiny_lm;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, OptimizerSnapshot, Seeds};
pub use tabular::{TabularLayout, TabularPolicy};
pub use tiny_lm::{TinyLm, TinyLmConfig};

use crate::error::{Error, Result};
use crate::protocol::{Token, Vocab};

/// A named contiguous slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Segment {
            name: name.into(),
            shape,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Incremental next-token state for sampling.
pub trait Decoder {
    /// Log-probabilities of the next token given everything pushed so far.
    fn logprobs(&self) -> &[f64];
    fn push(&mut self, token: Token) -> Result<()>;
}

pub trait Policy: Sync {
    type Trace: Send;

    fn vocab(&self) -> &Vocab;

    /// Longest sequence (context plus scored continuation) the model accepts.
    fn max_context(&self) -> usize;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn segments(&self) -> Vec<Segment>;

    /// Log-softmax over the vocabulary for the token following `context`.
    fn next_token_logprobs(&self, context: &[Token]) -> Result<Vec<f64>>;

    /// Teacher-forced pass over `continuation` after `prefix`.
    fn trace(&self, prefix: &[Token], continuation: &[Token]) -> Result<Self::Trace>;

    fn trace_logprobs<'t>(&self, trace: &'t Self::Trace) -> &'t [f64];

    /// Adds `Σ_i weights[i] · ∇ log π(c_i | ·)` for the traced continuation.
    fn backward(&self, trace: &Self::Trace, weights: &[f64], buffer: &mut GradBuffer);

    fn decoder(&self, prefix: &[Token]) -> Result<Box<dyn Decoder + '_>>;

    fn num_params(&self) -> usize {
        self.params().len()
    }
}

/// Gradient accumulator aligned with a policy's parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    pub grad: Vec<f64>,
    pub samples: usize,
}

impl GradBuffer {
    pub fn zeros(len: usize) -> Self {
        GradBuffer {
            grad: vec![0.0; len],
            samples: 0,
        }
    }

    pub fn for_policy<P: Policy + ?Sized>(policy: &P) -> Self {
        Self::zeros(policy.num_params())
    }

    pub fn len(&self) -> usize {
        self.grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad.is_empty()
    }

    pub fn add(&mut self, other: &GradBuffer) {
        assert_eq!(self.len(), other.len(), "gradient buffers of different shape");
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
        self.samples += other.samples;
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) {
        assert_eq!(self.len(), other.len(), "gradient buffers of different shape");
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += scale * b;
        }
        self.samples += other.samples;
    }

    pub fn scale(&mut self, s: f64) {
        self.grad.iter_mut().for_each(|g| *g *= s);
    }

    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grad.iter().all(|g| g.is_finite())
    }

    pub fn clear(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        self.samples = 0;
    }
}

/// Result of [`sample_continuation`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub tokens: Vec<Token>,
    /// Temperature-1 log-probabilities of the sampled tokens.
    pub logprobs: Vec<f64>,
    pub truncated: bool,
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    row.iter_mut().for_each(|v| *v -= log_z);
}

pub fn next_token_distribution<P: Policy + ?Sized>(model: &P, context: &[Token]) -> Result<Vec<f64>> {
    Ok(model
        .next_token_logprobs(context)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

fn check_budget<P: Policy + ?Sized>(model: &P, prefix: &[Token], max_new: usize) -> Result<()> {
    let len = prefix.len() + max_new;
    if len > model.max_context() {
        return Err(Error::ContextTooLong {
            len,
            max: model.max_context(),
        });
    }
    Ok(())
}

fn draw<R: Rng + ?Sized>(logprobs: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = if temperature == 1.0 {
        logprobs.iter().map(|&lp| lp.exp()).collect()
    } else {
        logprobs
            .iter()
            .map(|&lp| ((lp - max) / temperature).exp())
            .collect()
    };
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Samples until `stop` is emitted or `max_new` tokens were drawn.
pub fn sample_continuation<P, R>(
    model: &P,
    prefix: &[Token],
    temperature: f64,
    max_new: usize,
    stop: Token,
    rng: &mut R,
) -> Result<Sampled>
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_budget(model, prefix, max_new)?;
    let mut dec = model.decoder(prefix)?;
    let mut tokens = Vec::with_capacity(max_new);
    let mut logprobs = Vec::with_capacity(max_new);
    for i in 0..max_new {
        let lp = dec.logprobs();
        let idx = draw(lp, temperature, rng);
        let token = Token(idx as u16);
        tokens.push(token);
        logprobs.push(lp[idx]);
        if token == stop {
            return Ok(Sampled {
                tokens,
                logprobs,
                truncated: false,
            });
        }
        if i + 1 < max_new {
            dec.push(token)?;
        }
    }
    Ok(Sampled {
        tokens,
        logprobs,
        truncated: true,
    })
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_continuation<P: Policy + ?Sized>(
    model: &P,
    prefix: &[Token],
    max_new: usize,
    stop: Token,
) -> Result<(Vec<Token>, bool)> {
    check_budget(model, prefix, max_new)?;
    let mut dec = model.decoder(prefix)?;
    let mut tokens = Vec::with_capacity(max_new);
    for i in 0..max_new {
        let lp = dec.logprobs();
        let mut best = 0;
        for (j, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = j;
            }
        }
        let token = Token(best as u16);
        tokens.push(token);
        if token == stop {
            return Ok((tokens, false));
        }
        if i + 1 < max_new {
            dec.push(token)?;
        }
    }
    Ok((tokens, true))
}

pub fn score_continuation<P: Policy + ?Sized>(
    model: &P,
    prefix: &[Token],
    continuation: &[Token],
) -> Result<Vec<f64>> {
    if continuation.is_empty() {
        return Ok(Vec::new());
    }
    let trace = model.trace(prefix, continuation)?;
    Ok(model.trace_logprobs(&trace).to_vec())
}

/// `buffer += weight · ∇ log π(continuation | prefix)`.
pub fn accumulate_weighted_logprob_grad<P: Policy + ?Sized>(
    model: &P,
    buffer: &mut GradBuffer,
    prefix: &[Token],
    continuation: &[Token],
    weight: f64,
) -> Result<()> {
    if continuation.is_empty() {
        return Ok(());
    }
    let trace = model.trace(prefix, continuation)?;
    if weight != 0.0 {
        model.backward(&trace, &vec![weight; continuation.len()], buffer);
    }
    buffer.samples += 1;
    Ok(())
}

/// Same as [`accumulate_weighted_logprob_grad`] with one weight per token.
/// Returns the per-token log-probabilities of the pass.
pub fn accumulate_token_weighted_grad<P: Policy + ?Sized>(
    model: &P,
    buffer: &mut GradBuffer,
    prefix: &[Token],
    continuation: &[Token],
    weights: &[f64],
) -> Result<Vec<f64>> {
    assert_eq!(weights.len(), continuation.len());
    if continuation.is_empty() {
        return Ok(Vec::new());
    }
    let trace = model.trace(prefix, continuation)?;
    if weights.iter().any(|&w| w != 0.0) {
        model.backward(&trace, weights, buffer);
    }
    buffer.samples += 1;
    Ok(model.trace_logprobs(&trace).to_vec())
}

/// Decoder that recomputes the full next-token distribution at every step.
pub(crate) struct RecomputeDecoder<'a, P: Policy + ?Sized> {
    model: &'a P,
    context: Vec<Token>,
    current: Vec<f64>,
}

impl<'a, P: Policy + ?Sized> RecomputeDecoder<'a, P> {
    pub(crate) fn new(model: &'a P, prefix: &[Token]) -> Result<Self> {
        let current = model.next_token_logprobs(prefix)?;
        Ok(RecomputeDecoder {
            model,
            context: prefix.to_vec(),
            current,
        })
    }
}

impl<P: Policy + ?Sized> Decoder for RecomputeDecoder<'_, P> {
    fn logprobs(&self) -> &[f64] {
        &self.current
    }

    fn push(&mut self, token: Token) -> Result<()> {
        self.context.push(token);
        self.current = self.model.next_token_logprobs(&self.context)?;
        Ok(())
    }
}

/// Rounds every parameter to the nearest `f32`, the checkpoint precision.
pub fn round_params_to_f32(params: &mut [f64]) {
    params.iter_mut().for_each(|p| *p = *p as f32 as f64);
}
