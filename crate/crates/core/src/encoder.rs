//! Depth-sequence encoder: sinusoidal depth positional encoding, multi-head
//! self-attention blocks with residual + layer norm, a mean-pool classifier
//! head, and binary cross-entropy, all with exact hand-written gradients.
//!
//! The fusion features at the stack depths form a short sequence; attention
//! runs full (non-causal) over it. Position enters through the rank of each
//! item's depth, so two items at the same depth receive the same encoding.

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-12;
/// Predictions are clamped to this open interval before the loss.
pub const PRED_CLAMP: f64 = 1e-7;

/// Sinusoidal encoding: even dimensions carry
/// `sin(depth / 10000^(2i/d_model))`, odd dimensions
/// `cos(depth / 10000^(2(i-1)/d_model))`, so each (even, odd) pair shares
/// its argument.
pub fn positional_encoding(depth: f64, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|i| {
            if i % 2 == 0 {
                let scale = 10000f64.powf(2.0 * i as f64 / d_model as f64);
                (depth / scale).sin()
            } else {
                let scale = 10000f64.powf(2.0 * (i - 1) as f64 / d_model as f64);
                (depth / scale).cos()
            }
        })
        .collect()
}

/// Rank of each depth among the distinct sorted depths; equal depths share
/// a rank. For a strictly increasing sequence this is just 0, 1, 2, ...
pub fn depth_ranks(depths: &[f64]) -> Vec<usize> {
    let mut ranks = Vec::with_capacity(depths.len());
    let mut rank = 0usize;
    for (i, &d) in depths.iter().enumerate() {
        if i > 0 && d > depths[i - 1] {
            rank += 1;
        }
        ranks.push(rank);
    }
    ranks
}

/// Ordered (depth, feature) pairs feeding the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSequence {
    pub depths: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    pub d_model: usize,
}

impl DepthSequence {
    /// Depths must be sorted ascending (ties allowed) and every feature must
    /// have length `d_model`.
    pub fn new(depths: Vec<f64>, features: Vec<Vec<f64>>, d_model: usize) -> Result<Self> {
        if depths.is_empty() || depths.len() != features.len() {
            return Err(Error::domain("depth sequence needs matching, non-empty depths/features"));
        }
        if depths.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::domain("depths must be sorted ascending"));
        }
        for f in &features {
            if f.len() != d_model {
                return Err(Error::domain("feature length must equal d_model"));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("non-finite feature"));
            }
        }
        Ok(DepthSequence { depths, features, d_model })
    }
}

/// Encoder hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_model: usize,
    pub n_layers: usize,
    /// Optional position-wise feed-forward sublayer (hidden = 2*d_model).
    pub feedforward: bool,
}

impl AttentionConfig {
    pub fn new(n_heads: usize, d_model: usize, n_layers: usize) -> Result<Self> {
        let cfg = AttentionConfig { n_heads, d_model, n_layers, feedforward: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads < 1 || self.d_model < 1 || self.n_layers < 1 {
            return Err(Error::config("attention config fields must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Dense layer `y = W x + b` with `W` stored row-major `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

impl LinearParams {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        LinearParams { w: vec![0.0; n_in * n_out], b: vec![0.0; n_out], n_in, n_out }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for o in 0..self.n_out {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            y[o] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        y
    }

    /// Accumulate gradients for `y = W x + b` given `dy`; returns `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_in];
        for o in 0..self.n_out {
            gb[o] += dy[o];
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            let grow = &mut gw[o * self.n_in..(o + 1) * self.n_in];
            for i in 0..self.n_in {
                grow[i] += dy[o] * x[i];
                dx[i] += row[i] * dy[o];
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        LayerNormParams { gamma: vec![1.0; d], beta: vec![0.0; d] }
    }

    pub fn zeros(d: usize) -> Self {
        LayerNormParams { gamma: vec![0.0; d], beta: vec![0.0; d] }
    }
}

/// Normalize a vector to zero mean, unit variance; returns the normalized
/// vector and `1/sqrt(var + eps)` for the backward pass.
pub fn layer_norm_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Backward through the parameterless standardization `xhat = (x-mu)/sigma`.
pub fn standardize_backward(xhat: &[f64], inv_std: f64, dout: &[f64]) -> Vec<f64> {
    let d = xhat.len();
    let mean_d = dout.iter().sum::<f64>() / d as f64;
    let mean_dx = dout.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
    (0..d).map(|i| inv_std * (dout[i] - mean_d - xhat[i] * mean_dx)).collect()
}

fn layer_norm_apply(ln: &LayerNormParams, xhat: &[f64]) -> Vec<f64> {
    xhat.iter().zip(&ln.gamma).zip(&ln.beta).map(|((x, g), b)| g * x + b).collect()
}

/// Backward through `out = gamma*xhat + beta`, `xhat = (z - mu)/sigma`.
fn layer_norm_backward(
    ln: &LayerNormParams,
    xhat: &[f64],
    inv_std: f64,
    dout: &[f64],
    g_gamma: &mut [f64],
    g_beta: &mut [f64],
) -> Vec<f64> {
    let d = xhat.len();
    let mut dxhat = vec![0.0; d];
    for i in 0..d {
        g_gamma[i] += dout[i] * xhat[i];
        g_beta[i] += dout[i];
        dxhat[i] = dout[i] * ln.gamma[i];
    }
    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
    let mean_dxhat_xhat = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
    (0..d).map(|i| inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat)).collect()
}

/// Parameters of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub ln1: LayerNormParams,
    /// Present iff the config enables the feed-forward sublayer.
    pub ff1: Option<LinearParams>,
    pub ff2: Option<LinearParams>,
    pub ln2: Option<LayerNormParams>,
}

impl AttentionLayerParams {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        let d = cfg.d_model;
        AttentionLayerParams {
            wq: LinearParams::zeros(d, d),
            wk: LinearParams::zeros(d, d),
            wv: LinearParams::zeros(d, d),
            wo: LinearParams::zeros(d, d),
            ln1: LayerNormParams::identity(d),
            ff1: cfg.feedforward.then(|| LinearParams::zeros(d, 2 * d)),
            ff2: cfg.feedforward.then(|| LinearParams::zeros(2 * d, d)),
            ln2: cfg.feedforward.then(|| LayerNormParams::identity(d)),
        }
    }
}

/// Full encoder parameter set: blocks plus the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<AttentionLayerParams>,
    pub classifier: LinearParams,
}

impl EncoderParams {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        EncoderParams {
            layers: (0..cfg.n_layers).map(|_| AttentionLayerParams::zeros(cfg)).collect(),
            classifier: LinearParams::zeros(cfg.d_model, 1),
        }
    }

    /// A same-shape container with every value zeroed, for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x = 0.0));
        out
    }

    /// Visit every parameter tensor in a fixed order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            let tag = |name: &str| format!("encoder.layer{i}.{name}");
            f(&tag("wq.w"), &layer.wq.w);
            f(&tag("wq.b"), &layer.wq.b);
            f(&tag("wk.w"), &layer.wk.w);
            f(&tag("wk.b"), &layer.wk.b);
            f(&tag("wv.w"), &layer.wv.w);
            f(&tag("wv.b"), &layer.wv.b);
            f(&tag("wo.w"), &layer.wo.w);
            f(&tag("wo.b"), &layer.wo.b);
            f(&tag("ln1.gamma"), &layer.ln1.gamma);
            f(&tag("ln1.beta"), &layer.ln1.beta);
            if let Some(ff1) = &layer.ff1 {
                f(&tag("ff1.w"), &ff1.w);
                f(&tag("ff1.b"), &ff1.b);
            }
            if let Some(ff2) = &layer.ff2 {
                f(&tag("ff2.w"), &ff2.w);
                f(&tag("ff2.b"), &ff2.b);
            }
            if let Some(ln2) = &layer.ln2 {
                f(&tag("ln2.gamma"), &ln2.gamma);
                f(&tag("ln2.beta"), &ln2.beta);
            }
        }
        f("encoder.classifier.w", &self.classifier.w);
        f("encoder.classifier.b", &self.classifier.b);
    }

    /// Visit every parameter tensor mutably, in the same order as `visit`.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Vec<f64>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let tag = |name: &str| format!("encoder.layer{i}.{name}");
            f(&tag("wq.w"), &mut layer.wq.w);
            f(&tag("wq.b"), &mut layer.wq.b);
            f(&tag("wk.w"), &mut layer.wk.w);
            f(&tag("wk.b"), &mut layer.wk.b);
            f(&tag("wv.w"), &mut layer.wv.w);
            f(&tag("wv.b"), &mut layer.wv.b);
            f(&tag("wo.w"), &mut layer.wo.w);
            f(&tag("wo.b"), &mut layer.wo.b);
            f(&tag("ln1.gamma"), &mut layer.ln1.gamma);
            f(&tag("ln1.beta"), &mut layer.ln1.beta);
            if let Some(ff1) = &mut layer.ff1 {
                f(&tag("ff1.w"), &mut ff1.w);
                f(&tag("ff1.b"), &mut ff1.b);
            }
            if let Some(ff2) = &mut layer.ff2 {
                f(&tag("ff2.w"), &mut ff2.w);
                f(&tag("ff2.b"), &mut ff2.b);
            }
            if let Some(ln2) = &mut layer.ln2 {
                f(&tag("ln2.gamma"), &mut ln2.gamma);
                f(&tag("ln2.beta"), &mut ln2.beta);
            }
        }
        f("encoder.classifier.w", &mut self.classifier.w);
        f("encoder.classifier.b", &mut self.classifier.b);
    }
}

/// Recorded intermediates of one block's forward pass.
pub struct LayerTrace {
    pub x_in: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Attention weights per head: `weights[h][t][u]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub ctx: Vec<Vec<f64>>,
    pub attn_out: Vec<Vec<f64>>,
    /// `x + attn_out` before the first layer norm.
    pub residual_sum: Vec<Vec<f64>>,
    pub ln1_xhat: Vec<Vec<f64>>,
    pub ln1_inv_std: Vec<f64>,
    pub ln1_out: Vec<Vec<f64>>,
    pub ff_pre: Option<Vec<Vec<f64>>>,
    pub ff_hidden: Option<Vec<Vec<f64>>>,
    pub ff_residual: Option<Vec<Vec<f64>>>,
    pub ln2_xhat: Option<Vec<Vec<f64>>>,
    pub ln2_inv_std: Option<Vec<f64>>,
    pub x_out: Vec<Vec<f64>>,
}

/// Recorded intermediates of the whole encoder forward pass.
pub struct EncoderTrace {
    /// Standardized feature vectors (before the PE add).
    pub feat_xhat: Vec<Vec<f64>>,
    pub feat_inv_std: Vec<f64>,
    pub layer_traces: Vec<LayerTrace>,
    pub pooled: Vec<f64>,
    pub final_tokens: Vec<Vec<f64>>,
    pub logit: f64,
    pub prob: f64,
    pub clamped: bool,
}

fn softmax_inplace(row: &mut [f64]) -> Result<()> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numeric("non-finite attention score"));
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// One encoder block: multi-head scaled dot-product attention, output
/// projection, residual add, layer norm, then the optional feed-forward
/// sublayer with its own residual + norm.
pub fn attention_block(
    x: &[Vec<f64>],
    params: &AttentionLayerParams,
    cfg: &AttentionConfig,
) -> Result<LayerTrace> {
    let t_len = x.len();
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    let q: Vec<Vec<f64>> = x.iter().map(|xi| params.wq.apply(xi)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|xi| params.wk.apply(xi)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|xi| params.wv.apply(xi)).collect();

    let mut weights = vec![vec![vec![0.0; t_len]; t_len]; cfg.n_heads];
    let mut ctx = vec![vec![0.0; d]; t_len];
    for h in 0..cfg.n_heads {
        let lo = h * dh;
        for t in 0..t_len {
            let row = &mut weights[h][t];
            for u in 0..t_len {
                let dot: f64 = (0..dh).map(|i| q[t][lo + i] * k[u][lo + i]).sum();
                row[u] = dot * scale;
            }
            softmax_inplace(row)?;
            for u in 0..t_len {
                let a = row[u];
                for i in 0..dh {
                    ctx[t][lo + i] += a * v[u][lo + i];
                }
            }
        }
    }

    let attn_out: Vec<Vec<f64>> = ctx.iter().map(|c| params.wo.apply(c)).collect();
    let residual_sum: Vec<Vec<f64>> = x
        .iter()
        .zip(&attn_out)
        .map(|(xi, ai)| xi.iter().zip(ai).map(|(a, b)| a + b).collect())
        .collect();

    let mut ln1_xhat = Vec::with_capacity(t_len);
    let mut ln1_inv_std = Vec::with_capacity(t_len);
    let mut ln1_out = Vec::with_capacity(t_len);
    for r in &residual_sum {
        let (xhat, inv_std) = layer_norm_normalize(r);
        ln1_out.push(layer_norm_apply(&params.ln1, &xhat));
        ln1_xhat.push(xhat);
        ln1_inv_std.push(inv_std);
    }

    let (mut ff_pre, mut ff_hidden, mut ff_residual, mut ln2_xhat, mut ln2_inv_std) =
        (None, None, None, None, None);
    let x_out = if let (Some(ff1), Some(ff2), Some(ln2)) = (&params.ff1, &params.ff2, &params.ln2) {
        let pre: Vec<Vec<f64>> = ln1_out.iter().map(|t| ff1.apply(t)).collect();
        let hidden: Vec<Vec<f64>> =
            pre.iter().map(|p| p.iter().map(|&v| v.max(0.0)).collect()).collect();
        let ffout: Vec<Vec<f64>> = hidden.iter().map(|hid| ff2.apply(hid)).collect();
        let residual2: Vec<Vec<f64>> = ln1_out
            .iter()
            .zip(&ffout)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q2)| p + q2).collect())
            .collect();
        let mut xh = Vec::with_capacity(t_len);
        let mut inv = Vec::with_capacity(t_len);
        let mut out = Vec::with_capacity(t_len);
        for r in &residual2 {
            let (xhat, inv_std) = layer_norm_normalize(r);
            out.push(layer_norm_apply(ln2, &xhat));
            xh.push(xhat);
            inv.push(inv_std);
        }
        ff_pre = Some(pre);
        ff_hidden = Some(hidden);
        ff_residual = Some(residual2);
        ln2_xhat = Some(xh);
        ln2_inv_std = Some(inv);
        out
    } else {
        ln1_out.clone()
    };

    Ok(LayerTrace {
        x_in: x.to_vec(),
        q,
        k,
        v,
        weights,
        ctx,
        attn_out,
        residual_sum,
        ln1_xhat,
        ln1_inv_std,
        ln1_out,
        ff_pre,
        ff_hidden,
        ff_residual,
        ln2_xhat,
        ln2_inv_std,
        x_out,
    })
}

/// Multi-head attention over an already position-encoded sequence; returns
/// the block outputs (residual + norm applied).
pub fn multi_head_attention(
    seq: &[Vec<f64>],
    params: &AttentionLayerParams,
    cfg: &AttentionConfig,
) -> Result<Vec<Vec<f64>>> {
    Ok(attention_block(seq, params, cfg)?.x_out)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Forward pass over raw features with explicit PE ranks. Returns the
/// clamped probability and the full trace.
///
/// Features are standardized per token before the positional encoding is
/// added; raw pooled conv features can be orders of magnitude smaller than
/// the unit-amplitude sinusoids, and without the rescale the encoding
/// drowns the signal.
pub fn encoder_forward(
    features: &[Vec<f64>],
    ranks: &[usize],
    params: &EncoderParams,
    cfg: &AttentionConfig,
) -> Result<EncoderTrace> {
    if features.is_empty() || features.len() != ranks.len() {
        return Err(Error::domain("encoder needs matching non-empty features/ranks"));
    }
    cfg.validate()?;
    let mut feat_xhat = Vec::with_capacity(features.len());
    let mut feat_inv_std = Vec::with_capacity(features.len());
    let mut tokens: Vec<Vec<f64>> = features
        .iter()
        .zip(ranks)
        .map(|(f, &r)| {
            let (xhat, inv_std) = layer_norm_normalize(f);
            let pe = positional_encoding(r as f64, cfg.d_model);
            let tok = xhat.iter().zip(&pe).map(|(a, b)| a + b).collect();
            feat_xhat.push(xhat);
            feat_inv_std.push(inv_std);
            tok
        })
        .collect();

    let mut layer_traces = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let trace = attention_block(&tokens, layer, cfg)?;
        tokens = trace.x_out.clone();
        layer_traces.push(trace);
    }

    let t_len = tokens.len() as f64;
    let mut pooled = vec![0.0; cfg.d_model];
    for t in &tokens {
        for (p, v) in pooled.iter_mut().zip(t) {
            *p += v / t_len;
        }
    }
    let logit = params.classifier.apply(&pooled)[0];
    if !logit.is_finite() {
        return Err(Error::numeric("non-finite classifier logit"));
    }
    let raw = sigmoid(logit);
    let prob = raw.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    Ok(EncoderTrace {
        feat_xhat,
        feat_inv_std,
        layer_traces,
        pooled,
        final_tokens: tokens,
        logit,
        prob,
        clamped: raw != prob,
    })
}

/// Probability that the sequence is wet, in `(0, 1)`.
pub fn encoder_classify(
    seq: &DepthSequence,
    params: &EncoderParams,
    cfg: &AttentionConfig,
) -> Result<f64> {
    let ranks = depth_ranks(&seq.depths);
    Ok(encoder_forward(&seq.features, &ranks, params, cfg)?.prob)
}

/// Gradients for every encoder parameter, shaped like [`EncoderParams`].
pub type EncoderGrads = EncoderParams;

/// Backward pass from `d_loss/d_logit`. Returns gradients for the encoder
/// parameters and for every input feature vector.
pub fn encoder_backward(
    trace: &EncoderTrace,
    params: &EncoderParams,
    cfg: &AttentionConfig,
    d_logit: f64,
) -> (EncoderGrads, Vec<Vec<f64>>) {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = params.zeros_like();

    // classifier head
    let (cw, cb) = (&mut grads.classifier.w, &mut grads.classifier.b);
    let d_pooled = params.classifier.backward(&trace.pooled, &[d_logit], cw, cb);

    // mean pool
    let t_len = trace.final_tokens.len();
    let mut d_tokens: Vec<Vec<f64>> =
        vec![d_pooled.iter().map(|g| g / t_len as f64).collect(); t_len];

    // blocks in reverse
    for (li, lt) in trace.layer_traces.iter().enumerate().rev() {
        let lp = &params.layers[li];
        let lg = &mut grads.layers[li];

        // optional feed-forward sublayer
        let mut d_ln1_out = if let (Some(ff1), Some(ff2), Some(ln2)) =
            (&lp.ff1, &lp.ff2, &lp.ln2)
        {
            let xh = lt.ln2_xhat.as_ref().unwrap();
            let inv = lt.ln2_inv_std.as_ref().unwrap();
            let pre = lt.ff_pre.as_ref().unwrap();
            let hidden = lt.ff_hidden.as_ref().unwrap();
            let ln2_g = lg.ln2.as_mut().unwrap();
            let mut out = vec![vec![0.0; d]; t_len];
            for t in 0..t_len {
                let d_res = layer_norm_backward(
                    ln2,
                    &xh[t],
                    inv[t],
                    &d_tokens[t],
                    &mut ln2_g.gamma,
                    &mut ln2_g.beta,
                );
                // residual: ln1_out + ff(ln1_out)
                let ff2_g = lg.ff2.as_mut().unwrap();
                let d_hidden = ff2.backward(&hidden[t], &d_res, &mut ff2_g.w, &mut ff2_g.b);
                let d_pre: Vec<f64> = d_hidden
                    .iter()
                    .zip(&pre[t])
                    .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
                    .collect();
                let ff1_g = lg.ff1.as_mut().unwrap();
                let d_ff_in = ff1.backward(&lt.ln1_out[t], &d_pre, &mut ff1_g.w, &mut ff1_g.b);
                for i in 0..d {
                    out[t][i] = d_res[i] + d_ff_in[i];
                }
            }
            out
        } else {
            std::mem::take(&mut d_tokens)
        };

        // first layer norm
        let mut d_residual = vec![vec![0.0; d]; t_len];
        for t in 0..t_len {
            d_residual[t] = layer_norm_backward(
                &lp.ln1,
                &lt.ln1_xhat[t],
                lt.ln1_inv_std[t],
                &d_ln1_out[t],
                &mut lg.ln1.gamma,
                &mut lg.ln1.beta,
            );
        }
        d_ln1_out.clear();

        // residual: x + attn_out
        let mut d_x: Vec<Vec<f64>> = d_residual.clone();
        let mut d_ctx = vec![vec![0.0; d]; t_len];
        for t in 0..t_len {
            let dc = params.layers[li].wo.backward(
                &lt.ctx[t],
                &d_residual[t],
                &mut lg.wo.w,
                &mut lg.wo.b,
            );
            d_ctx[t] = dc;
        }

        // attention core
        let mut d_q = vec![vec![0.0; d]; t_len];
        let mut d_k = vec![vec![0.0; d]; t_len];
        let mut d_v = vec![vec![0.0; d]; t_len];
        for h in 0..cfg.n_heads {
            let lo = h * dh;
            for t in 0..t_len {
                let w_row = &lt.weights[h][t];
                // d a_{t,u} and softmax backward
                let mut d_a = vec![0.0; t_len];
                for u in 0..t_len {
                    d_a[u] = (0..dh).map(|i| d_ctx[t][lo + i] * lt.v[u][lo + i]).sum();
                    for i in 0..dh {
                        d_v[u][lo + i] += w_row[u] * d_ctx[t][lo + i];
                    }
                }
                let dot: f64 = w_row.iter().zip(&d_a).map(|(a, g)| a * g).sum();
                for u in 0..t_len {
                    let d_score = w_row[u] * (d_a[u] - dot);
                    for i in 0..dh {
                        d_q[t][lo + i] += d_score * lt.k[u][lo + i] * scale;
                        d_k[u][lo + i] += d_score * lt.q[t][lo + i] * scale;
                    }
                }
            }
        }

        // projections
        for t in 0..t_len {
            let dq = params.layers[li].wq.backward(&lt.x_in[t], &d_q[t], &mut lg.wq.w, &mut lg.wq.b);
            let dk = params.layers[li].wk.backward(&lt.x_in[t], &d_k[t], &mut lg.wk.w, &mut lg.wk.b);
            let dv = params.layers[li].wv.backward(&lt.x_in[t], &d_v[t], &mut lg.wv.w, &mut lg.wv.b);
            for i in 0..d {
                d_x[t][i] += dq[i] + dk[i] + dv[i];
            }
        }
        d_tokens = d_x;
    }

    // PE addition is constant; undo the input standardization
    let d_features: Vec<Vec<f64>> = d_tokens
        .iter()
        .enumerate()
        .map(|(t, dt)| standardize_backward(&trace.feat_xhat[t], trace.feat_inv_std[t], dt))
        .collect();
    (grads, d_features)
}

/// One batch of labels and clamped predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub labels: Vec<f64>,
    pub preds: Vec<f64>,
}

impl LossBatch {
    pub fn new(labels: Vec<f64>, preds: Vec<f64>) -> Result<Self> {
        if labels.len() != preds.len() || labels.is_empty() {
            return Err(Error::domain("loss batch needs matching non-empty labels/preds"));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::domain("labels must be 0 or 1"));
        }
        if preds.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::domain("predictions must lie strictly inside (0, 1)"));
        }
        Ok(LossBatch { labels, preds })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean binary cross-entropy and its analytic gradient per prediction:
/// `dL/dp_i = (p_i - y_i) / (N * p_i * (1 - p_i))`.
pub fn bce_loss(batch: &LossBatch) -> Result<(f64, Vec<f64>)> {
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(batch.len());
    for (&y, &p) in batch.labels.iter().zip(&batch.preds) {
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.push((p - y) / (n * p * (1.0 - p)));
    }
    Ok((loss / n, grad))
}
