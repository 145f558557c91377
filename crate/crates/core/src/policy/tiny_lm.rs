//! Pre-LayerNorm decoder-only transformer with learned positions.
//!
//! The forward pass is written row by row so that the incremental decoder
//! (which keeps per-layer key/value rows) performs exactly the same floating
//! point operations as the teacher-forced pass. Gradients come from an
//! explicit backward pass over the fixed architecture.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{log_softmax_in_place, Decoder, GradBuffer, Policy, Segment};
use crate::error::{Error, Result};
use crate::protocol::{Token, Vocab};
use crate::rng::Stream;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyLmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context: usize,
    pub init_std: f64,
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        TinyLmConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            context: 256,
            init_std: 0.02,
        }
    }
}

impl TinyLmConfig {
    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.context < 2 || !(self.init_std >= 0.0) {
            return Err(Error::InvalidArgument(
                "d_ff must be positive, context at least 2, init_std non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    proj_w: usize,
    proj_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    fn new(cfg: &TinyLmConfig, vocab: usize) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let mut segments = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let off = total;
            let seg = Segment::new(name, shape);
            total += seg.len();
            segments.push(seg);
            off
        };
        let tok_emb = push("tok_emb".into(), vec![vocab, d]);
        let pos_emb = push("pos_emb".into(), vec![cfg.context, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.gain"), vec![d]),
                ln1_b: push(p("ln1.bias"), vec![d]),
                qkv_w: push(p("attn.qkv.weight"), vec![d, 3 * d]),
                qkv_b: push(p("attn.qkv.bias"), vec![3 * d]),
                out_w: push(p("attn.out.weight"), vec![d, d]),
                out_b: push(p("attn.out.bias"), vec![d]),
                ln2_g: push(p("ln2.gain"), vec![d]),
                ln2_b: push(p("ln2.bias"), vec![d]),
                fc_w: push(p("mlp.fc.weight"), vec![d, f]),
                fc_b: push(p("mlp.fc.bias"), vec![f]),
                proj_w: push(p("mlp.proj.weight"), vec![f, d]),
                proj_b: push(p("mlp.proj.bias"), vec![d]),
            });
        }
        let lnf_g = push("ln_f.gain".into(), vec![d]);
        let lnf_b = push("ln_f.bias".into(), vec![d]);
        let head_w = push("head.weight".into(), vec![d, vocab]);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            segments,
            total,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TinyLm {
    config: TinyLmConfig,
    vocab: Vocab,
    layout: Layout,
    params: Vec<f64>,
}

// ---- row primitives -------------------------------------------------------

/// `out = in · W + b` with `W` stored `[in_dim, out_dim]` row-major.
fn linear_row(input: &[f64], w: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    let od = out.len();
    match b {
        Some(b) => out.copy_from_slice(b),
        None => out.iter_mut().for_each(|o| *o = 0.0),
    }
    for (k, &a) in input.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let row = &w[k * od..(k + 1) * od];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += a * wv;
        }
    }
}

/// Accumulates `dW += in ⊗ dout`, `db += dout` and writes `din = W · dout`.
fn linear_row_backward(
    input: &[f64],
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    din: &mut [f64],
) {
    let od = dout.len();
    if let Some(db) = db {
        for (g, &d) in db.iter_mut().zip(dout) {
            *g += d;
        }
    }
    for (k, &a) in input.iter().enumerate() {
        let row = &w[k * od..(k + 1) * od];
        let grow = &mut dw[k * od..(k + 1) * od];
        let mut acc = 0.0;
        for ((g, &wv), &d) in grow.iter_mut().zip(row).zip(dout) {
            *g += a * d;
            acc += wv * d;
        }
        din[k] = acc;
    }
}

/// LayerNorm of one row; stores the normalized row in `xhat`, returns rstd.
fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64], xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = xhat[i] * g[i] + b[i];
    }
    rstd
}

/// Adds the LayerNorm input gradient to `dx`.
fn layer_norm_row_backward(
    xhat: &[f64],
    rstd: f64,
    g: &[f64],
    dout: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let n = xhat.len();
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for i in 0..n {
        dg[i] += dout[i] * xhat[i];
        db[i] += dout[i];
        let dxh = dout[i] * g[i];
        sum_dxhat += dxh;
        sum_dxhat_xhat += dxh * xhat[i];
    }
    let nf = n as f64;
    for i in 0..n {
        let dxh = dout[i] * g[i];
        dx[i] += rstd / nf * (nf * dxh - sum_dxhat - xhat[i] * sum_dxhat_xhat);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Causal attention for row `t` over `qkv` rows `0..=t` (`[q | k | v]` per row).
/// Writes the head-concatenated context into `ctx` and the attention weights
/// of head `h` into `probs[h * (t + 1)..]`.
fn attention_row(qkv: &[f64], t: usize, d: usize, n_heads: usize, probs: &mut [f64], ctx: &mut [f64]) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let stride = 3 * d;
    let q_row = &qkv[t * stride..t * stride + d];
    ctx.iter_mut().for_each(|c| *c = 0.0);
    for h in 0..n_heads {
        let q = &q_row[h * dh..(h + 1) * dh];
        let p = &mut probs[h * (t + 1)..(h + 1) * (t + 1)];
        let mut max = f64::NEG_INFINITY;
        for (s, ps) in p.iter_mut().enumerate() {
            let k = &qkv[s * stride + d + h * dh..s * stride + d + (h + 1) * dh];
            let score = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            *ps = score;
            max = max.max(score);
        }
        let mut z = 0.0;
        for ps in p.iter_mut() {
            *ps = (*ps - max).exp();
            z += *ps;
        }
        let out = &mut ctx[h * dh..(h + 1) * dh];
        for (s, ps) in p.iter_mut().enumerate() {
            *ps /= z;
            let v = &qkv[s * stride + 2 * d + h * dh..s * stride + 2 * d + (h + 1) * dh];
            for (o, &vv) in out.iter_mut().zip(v) {
                *o += *ps * vv;
            }
        }
    }
}

// ---- traces ---------------------------------------------------------------

#[derive(Clone, Debug, Default)]
struct LayerActs {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    /// Per row `t`: `n_heads * (t + 1)` attention weights.
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    x_mid: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    h2: Vec<f64>,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
}

pub struct TinyLmTrace {
    input: Vec<Token>,
    targets: Vec<Token>,
    /// Row of the first scored position.
    first: usize,
    layers: Vec<LayerActs>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    hf: Vec<f64>,
    /// Full log-softmax rows for scored positions.
    logp_rows: Vec<Vec<f64>>,
    logprobs: Vec<f64>,
}

impl TinyLm {
    pub fn new(config: TinyLmConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.size());
        let mut params = vec![0.0; layout.total];
        let mut rng = Stream::new(seed, "tiny-lm-init").rng();
        let normal = Normal::new(0.0, config.init_std.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut offset = 0;
        for seg in &layout.segments {
            let n = seg.len();
            let slice = &mut params[offset..offset + n];
            if seg.name.ends_with(".gain") {
                slice.iter_mut().for_each(|p| *p = 1.0);
            } else if seg.name.ends_with(".bias") {
                // zero
            } else if config.init_std > 0.0 {
                slice.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
            }
            offset += n;
        }
        super::round_params_to_f32(&mut params);
        Ok(TinyLm {
            config,
            vocab,
            layout,
            params,
        })
    }

    /// Rebuilds a model around an existing parameter vector.
    pub fn from_params(config: TinyLmConfig, vocab: Vocab, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.size());
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(TinyLm {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &TinyLmConfig {
        &self.config
    }

    /// Randomly perturbs every parameter; used to move tests away from the
    /// symmetric initialization.
    pub fn jitter<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for p in &mut self.params {
            *p += rng.gen_range(-scale..=scale);
        }
    }

    fn p(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    fn embed_row(&self, token: Token, pos: usize, out: &mut [f64]) {
        let d = self.config.d_model;
        let te = self.p(self.layout.tok_emb + token.index() * d, d);
        let pe = self.p(self.layout.pos_emb + pos * d, d);
        for i in 0..d {
            out[i] = te[i] + pe[i];
        }
    }

    /// Computes `ln1` and the `qkv` row for one position of layer `l`.
    fn qkv_row(&self, l: usize, x: &[f64], xhat: &mut [f64], h1: &mut [f64], qkv: &mut [f64]) -> f64 {
        let d = self.config.d_model;
        let lo = &self.layout.layers[l];
        let rstd = layer_norm_row(x, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d), xhat, h1);
        linear_row(h1, self.p(lo.qkv_w, d * 3 * d), Some(self.p(lo.qkv_b, 3 * d)), qkv);
        rstd
    }

    /// Everything after attention for one row of layer `l`: output projection,
    /// residual, `ln2`, MLP, residual. `x` holds the layer input and receives
    /// the layer output.
    #[allow(clippy::too_many_arguments)]
    fn post_attention_row(
        &self,
        l: usize,
        ctx: &[f64],
        x: &mut [f64],
        x_mid: &mut [f64],
        ln2_xhat: &mut [f64],
        h2: &mut [f64],
        fc_pre: &mut [f64],
        fc_act: &mut [f64],
    ) -> f64 {
        let (d, f) = (self.config.d_model, self.config.d_ff);
        let lo = &self.layout.layers[l];
        let mut attn_out = vec![0.0; d];
        linear_row(ctx, self.p(lo.out_w, d * d), Some(self.p(lo.out_b, d)), &mut attn_out);
        for i in 0..d {
            x_mid[i] = x[i] + attn_out[i];
        }
        let rstd = layer_norm_row(x_mid, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d), ln2_xhat, h2);
        linear_row(h2, self.p(lo.fc_w, d * f), Some(self.p(lo.fc_b, f)), fc_pre);
        for (a, &z) in fc_act.iter_mut().zip(fc_pre.iter()) {
            *a = gelu(z);
        }
        let mut mlp_out = vec![0.0; d];
        linear_row(fc_act, self.p(lo.proj_w, f * d), Some(self.p(lo.proj_b, d)), &mut mlp_out);
        for i in 0..d {
            x[i] = x_mid[i] + mlp_out[i];
        }
        rstd
    }

    fn head_row(&self, x: &[f64], xhat: &mut [f64], hf: &mut [f64], logits: &mut [f64]) -> f64 {
        let (d, v) = (self.config.d_model, self.vocab.size());
        let rstd = layer_norm_row(
            x,
            self.p(self.layout.lnf_g, d),
            self.p(self.layout.lnf_b, d),
            xhat,
            hf,
        );
        linear_row(hf, self.p(self.layout.head_w, d * v), None, logits);
        rstd
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.context {
            return Err(Error::ContextTooLong {
                len,
                max: self.config.context,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| !self.vocab.contains(**t)) {
            Some(t) => Err(Error::InvalidArgument(format!("token {t} outside vocabulary"))),
            None => Ok(()),
        }
    }

    /// Full forward pass over `input`; log-softmax rows are kept from `first`.
    fn forward(&self, input: &[Token], first: usize) -> (Vec<LayerActs>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        let cfg = &self.config;
        let (d, f, nh, v) = (cfg.d_model, cfg.d_ff, cfg.n_heads, self.vocab.size());
        let t_len = input.len();
        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in input.iter().enumerate() {
            self.embed_row(tok, t, &mut x[t * d..(t + 1) * d]);
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut a = LayerActs {
                ln1_xhat: vec![0.0; t_len * d],
                ln1_rstd: vec![0.0; t_len],
                h1: vec![0.0; t_len * d],
                qkv: vec![0.0; t_len * 3 * d],
                probs: Vec::with_capacity(t_len),
                ctx: vec![0.0; t_len * d],
                x_mid: vec![0.0; t_len * d],
                ln2_xhat: vec![0.0; t_len * d],
                ln2_rstd: vec![0.0; t_len],
                h2: vec![0.0; t_len * d],
                fc_pre: vec![0.0; t_len * f],
                fc_act: vec![0.0; t_len * f],
            };
            for t in 0..t_len {
                a.ln1_rstd[t] = self.qkv_row(
                    l,
                    &x[t * d..(t + 1) * d],
                    &mut a.ln1_xhat[t * d..(t + 1) * d],
                    &mut a.h1[t * d..(t + 1) * d],
                    &mut a.qkv[t * 3 * d..(t + 1) * 3 * d],
                );
            }
            for t in 0..t_len {
                let mut probs = vec![0.0; nh * (t + 1)];
                attention_row(&a.qkv, t, d, nh, &mut probs, &mut a.ctx[t * d..(t + 1) * d]);
                a.probs.push(probs);
                a.ln2_rstd[t] = self.post_attention_row(
                    l,
                    &a.ctx[t * d..(t + 1) * d],
                    &mut x[t * d..(t + 1) * d],
                    &mut a.x_mid[t * d..(t + 1) * d],
                    &mut a.ln2_xhat[t * d..(t + 1) * d],
                    &mut a.h2[t * d..(t + 1) * d],
                    &mut a.fc_pre[t * f..(t + 1) * f],
                    &mut a.fc_act[t * f..(t + 1) * f],
                );
            }
            layers.push(a);
        }
        let mut lnf_xhat = vec![0.0; t_len * d];
        let mut lnf_rstd = vec![0.0; t_len];
        let mut hf = vec![0.0; t_len * d];
        let mut rows = Vec::with_capacity(t_len.saturating_sub(first));
        for t in first..t_len {
            let mut logits = vec![0.0; v];
            lnf_rstd[t] = self.head_row(
                &x[t * d..(t + 1) * d],
                &mut lnf_xhat[t * d..(t + 1) * d],
                &mut hf[t * d..(t + 1) * d],
                &mut logits,
            );
            log_softmax_in_place(&mut logits);
            rows.push(logits);
        }
        (layers, lnf_xhat, lnf_rstd, hf, rows)
    }
}

impl Policy for TinyLm {
    type Trace = TinyLmTrace;

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_context(&self) -> usize {
        self.config.context
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn segments(&self) -> Vec<Segment> {
        self.layout.segments.clone()
    }

    fn next_token_logprobs(&self, context: &[Token]) -> Result<Vec<f64>> {
        if context.is_empty() {
            return Err(Error::InvalidArgument("empty context".into()));
        }
        if context.len() >= self.config.context {
            return Err(Error::ContextTooLong {
                len: context.len(),
                max: self.config.context,
            });
        }
        self.check_tokens(context)?;
        let (_, _, _, _, mut rows) = self.forward(context, context.len() - 1);
        Ok(rows.pop().expect("one row"))
    }

    fn trace(&self, prefix: &[Token], continuation: &[Token]) -> Result<TinyLmTrace> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty prefix".into()));
        }
        self.check_len(prefix.len() + continuation.len())?;
        self.check_tokens(prefix)?;
        self.check_tokens(continuation)?;
        let mut input = prefix.to_vec();
        if continuation.len() > 1 {
            input.extend_from_slice(&continuation[..continuation.len() - 1]);
        }
        let first = prefix.len() - 1;
        if continuation.is_empty() {
            return Ok(TinyLmTrace {
                input,
                targets: Vec::new(),
                first,
                layers: Vec::new(),
                lnf_xhat: Vec::new(),
                lnf_rstd: Vec::new(),
                hf: Vec::new(),
                logp_rows: Vec::new(),
                logprobs: Vec::new(),
            });
        }
        let (layers, lnf_xhat, lnf_rstd, hf, logp_rows) = self.forward(&input, first);
        let logprobs = continuation
            .iter()
            .zip(&logp_rows)
            .map(|(tok, row)| row[tok.index()])
            .collect();
        Ok(TinyLmTrace {
            input,
            targets: continuation.to_vec(),
            first,
            layers,
            lnf_xhat,
            lnf_rstd,
            hf,
            logp_rows,
            logprobs,
        })
    }

    fn trace_logprobs<'t>(&self, trace: &'t TinyLmTrace) -> &'t [f64] {
        &trace.logprobs
    }

    fn backward(&self, trace: &TinyLmTrace, weights: &[f64], buffer: &mut GradBuffer) {
        assert_eq!(weights.len(), trace.targets.len());
        if trace.targets.is_empty() {
            return;
        }
        let cfg = &self.config;
        let (d, f, nh, v) = (cfg.d_model, cfg.d_ff, cfg.n_heads, self.vocab.size());
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let t_len = trace.input.len();
        let lay = &self.layout;
        let g = &mut buffer.grad;

        // head and final LayerNorm
        let mut dx = vec![0.0; t_len * d];
        let mut dhf = vec![0.0; d];
        let mut dlogits = vec![0.0; v];
        for (i, (&w, row)) in weights.iter().zip(&trace.logp_rows).enumerate() {
            if w == 0.0 {
                continue;
            }
            let t = trace.first + i;
            for (j, dl) in dlogits.iter_mut().enumerate() {
                *dl = -w * row[j].exp();
            }
            dlogits[trace.targets[i].index()] += w;
            linear_row_backward(
                &trace.hf[t * d..(t + 1) * d],
                self.p(lay.head_w, d * v),
                &dlogits,
                &mut g[lay.head_w..lay.head_w + d * v],
                None,
                &mut dhf,
            );
            let (dgain, dbias) = two_slices(g, lay.lnf_g, lay.lnf_b, d);
            layer_norm_row_backward(
                &trace.lnf_xhat[t * d..(t + 1) * d],
                trace.lnf_rstd[t],
                self.p(lay.lnf_g, d),
                &dhf,
                dgain,
                dbias,
                &mut dx[t * d..(t + 1) * d],
            );
        }

        let mut tmp_d = vec![0.0; d];
        let mut tmp_f = vec![0.0; f];
        let mut dh2 = vec![0.0; d];
        for l in (0..cfg.n_layers).rev() {
            let a = &trace.layers[l];
            let lo = &lay.layers[l];
            // dx currently holds d(layer output); becomes d(x_mid) then d(x_in).
            let mut dctx = vec![0.0; t_len * d];
            for t in 0..t_len {
                let dout = dx[t * d..(t + 1) * d].to_vec();
                // MLP: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
                {
                    let dproj_w = &mut g[lo.proj_w..lo.proj_w + f * d];
                    linear_row_backward(
                        &a.fc_act[t * f..(t + 1) * f],
                        self.p(lo.proj_w, f * d),
                        &dout,
                        dproj_w,
                        None,
                        &mut tmp_f,
                    );
                }
                for (gb, &dv) in g[lo.proj_b..lo.proj_b + d].iter_mut().zip(&dout) {
                    *gb += dv;
                }
                for (k, dfa) in tmp_f.iter_mut().enumerate() {
                    *dfa *= gelu_grad(a.fc_pre[t * f + k]);
                }
                for (gb, &dv) in g[lo.fc_b..lo.fc_b + f].iter_mut().zip(&tmp_f) {
                    *gb += dv;
                }
                linear_row_backward(
                    &a.h2[t * d..(t + 1) * d],
                    self.p(lo.fc_w, d * f),
                    &tmp_f,
                    &mut g[lo.fc_w..lo.fc_w + d * f],
                    None,
                    &mut dh2,
                );
                let dx_row = &mut dx[t * d..(t + 1) * d];
                let (dgain, dbias) = two_slices(g, lo.ln2_g, lo.ln2_b, d);
                layer_norm_row_backward(
                    &a.ln2_xhat[t * d..(t + 1) * d],
                    a.ln2_rstd[t],
                    self.p(lo.ln2_g, d),
                    &dh2,
                    dgain,
                    dbias,
                    dx_row,
                );
                // dx_row now is d(x_mid); attention output projection
                let dmid = dx_row.to_vec();
                for (gb, &dv) in g[lo.out_b..lo.out_b + d].iter_mut().zip(&dmid) {
                    *gb += dv;
                }
                linear_row_backward(
                    &a.ctx[t * d..(t + 1) * d],
                    self.p(lo.out_w, d * d),
                    &dmid,
                    &mut g[lo.out_w..lo.out_w + d * d],
                    None,
                    &mut tmp_d,
                );
                dctx[t * d..(t + 1) * d].copy_from_slice(&tmp_d);
            }

            // attention
            let stride = 3 * d;
            let mut dqkv = vec![0.0; t_len * stride];
            for t in 0..t_len {
                let probs = &a.probs[t];
                for h in 0..nh {
                    let p = &probs[h * (t + 1)..(h + 1) * (t + 1)];
                    let dc = &dctx[t * d + h * dh..t * d + (h + 1) * dh];
                    let mut dp = vec![0.0; t + 1];
                    for s in 0..=t {
                        let vo = s * stride + 2 * d + h * dh;
                        let vrow = &a.qkv[vo..vo + dh];
                        dp[s] = dc.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        for k in 0..dh {
                            dqkv[vo + k] += p[s] * dc[k];
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(x, y)| x * y).sum();
                    let qo = t * stride + h * dh;
                    for s in 0..=t {
                        let ds = p[s] * (dp[s] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = s * stride + d + h * dh;
                        for k in 0..dh {
                            dqkv[qo + k] += ds * a.qkv[ko + k];
                            dqkv[ko + k] += ds * a.qkv[qo + k];
                        }
                    }
                }
            }
            for t in 0..t_len {
                let dq = &dqkv[t * stride..(t + 1) * stride];
                for (gb, &dv) in g[lo.qkv_b..lo.qkv_b + stride].iter_mut().zip(dq) {
                    *gb += dv;
                }
                linear_row_backward(
                    &a.h1[t * d..(t + 1) * d],
                    self.p(lo.qkv_w, d * stride),
                    dq,
                    &mut g[lo.qkv_w..lo.qkv_w + d * stride],
                    None,
                    &mut tmp_d,
                );
                let (dgain, dbias) = two_slices(g, lo.ln1_g, lo.ln1_b, d);
                layer_norm_row_backward(
                    &a.ln1_xhat[t * d..(t + 1) * d],
                    a.ln1_rstd[t],
                    self.p(lo.ln1_g, d),
                    &tmp_d,
                    dgain,
                    dbias,
                    &mut dx[t * d..(t + 1) * d],
                );
            }
        }

        for (t, &tok) in trace.input.iter().enumerate() {
            let drow = &dx[t * d..(t + 1) * d];
            let te = lay.tok_emb + tok.index() * d;
            let pe = lay.pos_emb + t * d;
            for i in 0..d {
                g[te + i] += drow[i];
                g[pe + i] += drow[i];
            }
        }
    }

    fn decoder(&self, prefix: &[Token]) -> Result<Box<dyn Decoder + '_>> {
        Ok(Box::new(KvDecoder::new(self, prefix)?))
    }
}

fn two_slices(g: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

/// Incremental decoder holding each layer's `qkv` rows.
struct KvDecoder<'a> {
    model: &'a TinyLm,
    qkv: Vec<Vec<f64>>,
    len: usize,
    current: Vec<f64>,
}

impl<'a> KvDecoder<'a> {
    fn new(model: &'a TinyLm, prefix: &[Token]) -> Result<Self> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty prefix".into()));
        }
        let mut dec = KvDecoder {
            model,
            qkv: vec![Vec::new(); model.config.n_layers],
            len: 0,
            current: Vec::new(),
        };
        for &t in prefix {
            dec.step(t)?;
        }
        Ok(dec)
    }

    fn step(&mut self, token: Token) -> Result<()> {
        let m = self.model;
        let cfg = &m.config;
        if self.len + 1 >= cfg.context {
            return Err(Error::ContextTooLong {
                len: self.len + 1,
                max: cfg.context,
            });
        }
        m.check_tokens(&[token])?;
        let (d, f, nh, v) = (cfg.d_model, cfg.d_ff, cfg.n_heads, m.vocab.size());
        let t = self.len;
        let mut x = vec![0.0; d];
        m.embed_row(token, t, &mut x);
        let (mut xhat, mut h1, mut row) = (vec![0.0; d], vec![0.0; d], vec![0.0; 3 * d]);
        let (mut x_mid, mut h2) = (vec![0.0; d], vec![0.0; d]);
        let (mut fc_pre, mut fc_act) = (vec![0.0; f], vec![0.0; f]);
        let mut ctx = vec![0.0; d];
        let mut probs = vec![0.0; nh * (t + 1)];
        for l in 0..cfg.n_layers {
            m.qkv_row(l, &x, &mut xhat, &mut h1, &mut row);
            self.qkv[l].extend_from_slice(&row);
            attention_row(&self.qkv[l], t, d, nh, &mut probs, &mut ctx);
            m.post_attention_row(
                l, &ctx, &mut x, &mut x_mid, &mut xhat, &mut h2, &mut fc_pre, &mut fc_act,
            );
        }
        let mut logits = vec![0.0; v];
        m.head_row(&x, &mut xhat, &mut h1, &mut logits);
        log_softmax_in_place(&mut logits);
        self.current = logits;
        self.len += 1;
        Ok(())
    }
}

impl Decoder for KvDecoder<'_> {
    fn logprobs(&self) -> &[f64] {
        &self.current
    }

    fn push(&mut self, token: Token) -> Result<()> {
        self.step(token)
    }
}
