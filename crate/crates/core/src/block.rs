//! One spike-gated dual-path block.
//!
//! ```text
//! z      = s_in · W_tcamᵀ                      (spikes only)
//! decay  = per-head  h ← α·h + (1−α)·z,  α = σ(γ)
//! attn   = windowed, spike-masked attention over c_in, zeroed where m_t = 0
//! o      = g·attn + (1−g)·decay,  g = σ(w_g)
//! c_mid  = LN₁(c_in + o);   s_mid = gate(c_mid)
//! f      = gate(c_mid · W_upᵀ) · W_downᵀ
//! c_out  = LN₂(c_mid + f);  s_out = gate(c_out)
//! ```
//!
//! All functions here operate on a single sequence laid out `[S × D]`.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gating::{gate_backward, gate_forward, GateCache, GateOutput, Gating};
use crate::numerics::{
    layer_norm, layer_norm_backward, linear, linear_backward, rope_rotate_heads, sigmoid,
    softmax_into, LayerNormCache,
};
use crate::tensor::{BinaryTensor, Scalar, Tensor};

// ---------------------------------------------------------------------------
// decay path

/// First-order per-head recurrence `h_t = α_h·h_{t−1} + (1−α_h)·z_t`.
///
/// `z` is `[S × H × d_k]`, `alpha` is `[H]`, `h0` is `[H × d_k]`. Returns every
/// state `h_1..h_S` and, separately, the final state for streaming.
pub fn decay_aggregate<T: Scalar>(
    z: &Tensor<T>,
    alpha: &Tensor<T>,
    h0: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (s, h, dk) = decay_shapes(z, alpha, h0)?;
    let mut states = Tensor::zeros(z.shape());
    let mut cur = h0.data().to_vec();
    for t in 0..s {
        for hi in 0..h {
            let a = alpha.data()[hi];
            for j in 0..dk {
                let idx = hi * dk + j;
                cur[idx] = a * cur[idx] + (T::one() - a) * z.data()[t * h * dk + idx];
            }
        }
        states.data_mut()[t * h * dk..(t + 1) * h * dk].copy_from_slice(&cur);
    }
    Ok((states, Tensor::from_raw(vec![h, dk], cur)))
}

/// Tokens for a decay factor `α` to halve a contribution: `ln 0.5 / ln α`.
pub fn half_life(alpha: f64) -> f64 {
    0.5f64.ln() / alpha.ln()
}

/// Direct-summation form `h_t = α^t·h0 + (1−α)·Σ_{k≤t} α^{t−k}·z_k`.
///
/// Quadratic in `S`; exists as an independent check on [`decay_aggregate`].
pub fn decay_closed_form<T: Scalar>(
    z: &Tensor<T>,
    alpha: &Tensor<T>,
    h0: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (s, h, dk) = decay_shapes(z, alpha, h0)?;
    let mut out = Tensor::zeros(&[s, h, dk]);
    for t in 1..=s {
        for hi in 0..h {
            let a = alpha.data()[hi].as_f64();
            for j in 0..dk {
                let idx = hi * dk + j;
                let mut acc = a.powi(t as i32) * h0.data()[idx].as_f64();
                for k in 1..=t {
                    acc += (1.0 - a) * a.powi((t - k) as i32) * z.data()[(k - 1) * h * dk + idx].as_f64();
                }
                out.data_mut()[(t - 1) * h * dk + idx] = T::lit(acc);
            }
        }
    }
    Ok(out)
}

fn decay_shapes<T: Scalar>(
    z: &Tensor<T>,
    alpha: &Tensor<T>,
    h0: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let [s, h, dk] = match *z.shape() {
        [s, h, dk] => [s, h, dk],
        _ => {
            return Err(Error::Dimension(format!(
                "decay input must be [S×H×d_k], got {:?}",
                z.shape()
            )))
        }
    };
    if alpha.len() != h || h0.shape() != [h, dk] {
        return Err(Error::Dimension(format!(
            "decay: alpha {:?}, h0 {:?} for z {:?}",
            alpha.shape(),
            h0.shape(),
            z.shape()
        )));
    }
    Ok((s, h, dk))
}

/// Returns `(dz, dα, dh0)` given `∂L/∂states`; `z`, `states` and the
/// gradient are `[S × H·d_k]`.
pub fn decay_backward<T: Scalar>(
    z: &Tensor<T>,
    alpha: &[T],
    h0: &[T],
    states: &Tensor<T>,
    grad_states: &Tensor<T>,
    heads: usize,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = z.rows();
    let width = z.cols();
    let dk = width / heads;
    let mut dz = Tensor::zeros(z.shape());
    let mut dalpha = vec![T::zero(); heads];
    let mut carry = vec![T::zero(); width];
    for t in (0..s).rev() {
        let g = grad_states.row(t);
        let zt = z.row(t);
        for hi in 0..heads {
            let a = alpha[hi];
            for j in 0..dk {
                let idx = hi * dk + j;
                let total = g[idx] + carry[idx];
                let prev = if t == 0 { h0[idx] } else { states.row(t - 1)[idx] };
                dz.row_mut(t)[idx] = (T::one() - a) * total;
                dalpha[hi] += total * (prev - zt[idx]);
                carry[idx] = a * total;
            }
        }
    }
    (dz, dalpha, carry)
}

// ---------------------------------------------------------------------------
// attention masking

/// `m_t = 1` iff any spike is active at position `t`.
pub fn spike_position_mask(s: &BinaryTensor) -> BinaryTensor {
    let data = (0..s.rows())
        .map(|t| s.row(t).iter().any(|&b| b == 1) as u8)
        .collect();
    BinaryTensor::from_raw(vec![s.rows()], data)
}

/// Visibility of key `j` from query `i`: causal, inside the window or an
/// anchor, and spike-active or an anchor.
#[inline]
pub fn key_visible(i: usize, j: usize, window: usize, n_global: usize, m: &[u8]) -> bool {
    let anchor = j < n_global;
    j <= i && (j + window > i || anchor) && (m[j] == 1 || anchor)
}

/// Additive `[S × S]` mask with entries `0` (visible) or `-∞`.
pub fn build_attention_mask<T: Scalar>(
    seq_len: usize,
    window: usize,
    n_global: usize,
    m: &BinaryTensor,
) -> Result<Tensor<T>> {
    if m.len() != seq_len {
        return Err(Error::Dimension(format!(
            "mask of length {} for sequence {seq_len}",
            m.len()
        )));
    }
    let mut out = Tensor::full(&[seq_len, seq_len], T::neg_infinity());
    for i in 0..seq_len {
        for j in 0..=i {
            if key_visible(i, j, window, n_global, m.data()) {
                out.row_mut(i)[j] = T::zero();
            }
        }
    }
    Ok(out)
}

/// Keys visible to query `i`, in increasing order, enumerated from the
/// anchor prefix and the window only.
pub fn visible_keys(i: usize, window: usize, n_global: usize, m: &[u8]) -> Vec<usize> {
    let win_start = (i + 1).saturating_sub(window);
    let mut keys: Vec<usize> = (0..n_global.min(win_start)).collect();
    keys.extend((win_start..=i).filter(|&j| key_visible(i, j, window, n_global, m)));
    keys
}

// ---------------------------------------------------------------------------
// attention path

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_out: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionShape {
    pub heads: usize,
    pub window: usize,
    pub n_global: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    c: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    keys: Vec<Vec<usize>>,
    /// `probs[i][h]` aligned with `keys[i]`.
    probs: Vec<Vec<Vec<T>>>,
    active: Vec<bool>,
    a_pre: Tensor<T>,
}

/// Spike-gated local attention over `c [S × D]` with position mask `m [S]`.
pub fn local_attention<T: Scalar>(
    c: &Tensor<T>,
    s: &BinaryTensor,
    params: &AttentionParams<T>,
    shape: AttentionShape,
) -> Result<Tensor<T>> {
    let m = spike_position_mask(s);
    Ok(attention_forward(c, m.data(), params, shape)?.0)
}

/// As [`local_attention`] with an explicit position mask; keeps what the
/// backward pass needs.
pub fn attention_forward<T: Scalar>(
    c: &Tensor<T>,
    m: &[u8],
    params: &AttentionParams<T>,
    shape: AttentionShape,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let s = c.rows();
    let d = c.cols();
    if shape.heads == 0 || d % shape.heads != 0 {
        return Err(Error::Dimension(format!(
            "width {d} not divisible by {} heads",
            shape.heads
        )));
    }
    if m.len() != s {
        return Err(Error::Dimension("position mask length".into()));
    }
    let dk = d / shape.heads;
    let positions: Vec<usize> = (0..s).collect();
    let q = rope_rotate_heads(&linear(c, &params.w_q)?, shape.heads, &positions, false)?;
    let k = rope_rotate_heads(&linear(c, &params.w_k)?, shape.heads, &positions, false)?;
    let v = linear(c, &params.w_v)?;
    let scale = T::one() / T::from_usize(dk).sqrt();

    let mut a_pre = Tensor::zeros(&[s, d]);
    let mut keys = Vec::with_capacity(s);
    let mut probs = Vec::with_capacity(s);
    let mut active = Vec::with_capacity(s);
    for i in 0..s {
        let ks = visible_keys(i, shape.window, shape.n_global, m);
        // rows without a spike are zeroed; rows without keys have no softmax
        let on = m[i] == 1 && !ks.is_empty();
        let mut per_head = Vec::with_capacity(shape.heads);
        if on {
            for h in 0..shape.heads {
                let qi = &q.row(i)[h * dk..(h + 1) * dk];
                let scores: Vec<T> = ks
                    .iter()
                    .map(|&j| {
                        let kj = &k.row(j)[h * dk..(h + 1) * dk];
                        qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale
                    })
                    .collect();
                let mut p = vec![T::zero(); ks.len()];
                softmax_into(&scores, &mut p).map_err(|_| Error::MaskedRow { row: i })?;
                let out = &mut a_pre.row_mut(i)[h * dk..(h + 1) * dk];
                for (&j, &pj) in ks.iter().zip(&p) {
                    let vj = &v.row(j)[h * dk..(h + 1) * dk];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
                per_head.push(p);
            }
        }
        keys.push(ks);
        probs.push(per_head);
        active.push(on);
    }
    let out = linear(&a_pre, &params.w_out)?;
    Ok((
        out,
        AttentionCache {
            c: c.clone(),
            q,
            k,
            v,
            keys,
            probs,
            active,
            a_pre,
        },
    ))
}

/// Returns `(dc, parameter grads)`.
pub fn attention_backward<T: Scalar>(
    cache: &AttentionCache<T>,
    params: &AttentionParams<T>,
    shape: AttentionShape,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionParams<T>)> {
    let s = cache.c.rows();
    let d = cache.c.cols();
    let dk = d / shape.heads;
    let scale = T::one() / T::from_usize(dk).sqrt();
    let (da, dw_out) = linear_backward(&cache.a_pre, &params.w_out, grad_out)?;
    let mut dq = Tensor::zeros(&[s, d]);
    let mut dkk = Tensor::zeros(&[s, d]);
    let mut dv = Tensor::zeros(&[s, d]);
    for i in 0..s {
        if !cache.active[i] {
            continue;
        }
        let ks = &cache.keys[i];
        for h in 0..shape.heads {
            let p = &cache.probs[i][h];
            let dai = &da.row(i)[h * dk..(h + 1) * dk];
            let dp: Vec<T> = ks
                .iter()
                .map(|&j| {
                    let vj = &cache.v.row(j)[h * dk..(h + 1) * dk];
                    dai.iter().zip(vj).map(|(&a, &b)| a * b).sum()
                })
                .collect();
            let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            for (n, &j) in ks.iter().enumerate() {
                let ds = p[n] * (dp[n] - dot) * scale;
                for x in 0..dk {
                    let col = h * dk + x;
                    dv.row_mut(j)[col] += p[n] * dai[x];
                    dq.row_mut(i)[col] += ds * cache.k.row(j)[col];
                    dkk.row_mut(j)[col] += ds * cache.q.row(i)[col];
                }
            }
        }
    }
    let positions: Vec<usize> = (0..s).collect();
    let dq = rope_rotate_heads(&dq, shape.heads, &positions, true)?;
    let dkk = rope_rotate_heads(&dkk, shape.heads, &positions, true)?;
    let (mut dc, dw_q) = linear_backward(&cache.c, &params.w_q, &dq)?;
    let (dc_k, dw_k) = linear_backward(&cache.c, &params.w_k, &dkk)?;
    let (dc_v, dw_v) = linear_backward(&cache.c, &params.w_v, &dv)?;
    dc.add_assign(&dc_k)?;
    dc.add_assign(&dc_v)?;
    Ok((
        dc,
        AttentionParams {
            w_q: dw_q,
            w_k: dw_k,
            w_v: dw_v,
            w_out: dw_out,
        },
    ))
}

// ---------------------------------------------------------------------------
// fusion

/// `g·attn + (1−g)·decay` with `g = σ(w_g)`.
pub fn fuse<T: Scalar>(attn: &Tensor<T>, decay: &Tensor<T>, w_g: T) -> Result<Tensor<T>> {
    let g = sigmoid(w_g);
    attn.zip_map(decay, |a, d| g * a + (T::one() - g) * d)
}

// ---------------------------------------------------------------------------
// spiking FFN

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FfnCache<T> {
    c: Tensor<T>,
    up_gate: GateCache<T>,
    emitted: Tensor<T>,
}

pub struct FfnOutput<T> {
    pub spikes: BinaryTensor,
    pub out: Tensor<T>,
    pub cache: FfnCache<T>,
}

/// Up-projection, gating site over time, down-projection of the spikes.
pub fn spiking_ffn<T: Scalar>(
    c: &Tensor<T>,
    params: &FfnParams<T>,
    gating: &Gating,
) -> Result<FfnOutput<T>> {
    let up = linear(c, &params.w_up)?;
    let GateOutput {
        spikes,
        emitted,
        cache,
    } = gate_forward(gating, &up)?;
    let out = linear(&emitted, &params.w_down)?;
    Ok(FfnOutput {
        spikes,
        out,
        cache: FfnCache {
            c: c.clone(),
            up_gate: cache,
            emitted,
        },
    })
}

pub fn ffn_backward<T: Scalar>(
    cache: &FfnCache<T>,
    params: &FfnParams<T>,
    gating: &Gating,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, FfnParams<T>)> {
    let (d_emitted, dw_down) = linear_backward(&cache.emitted, &params.w_down, grad_out)?;
    let d_up = gate_backward(gating, &cache.up_gate, &d_emitted)?;
    let (dc, dw_up) = linear_backward(&cache.c, &params.w_up, &d_up)?;
    Ok((dc, FfnParams { w_up: dw_up, w_down: dw_down }))
}

// ---------------------------------------------------------------------------
// block

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub w_tcam: Tensor<T>,
    /// Pre-sigmoid decay logits, `[H]`.
    pub gamma: Tensor<T>,
    pub attn: Option<AttentionParams<T>>,
    /// Pre-sigmoid fusion gate, `[1]`; absent when the attention path is.
    pub gate: Option<Tensor<T>>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ffn: FfnParams<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        Self {
            w_tcam: z(&self.w_tcam),
            gamma: z(&self.gamma),
            attn: self.attn.as_ref().map(|a| AttentionParams {
                w_q: z(&a.w_q),
                w_k: z(&a.w_k),
                w_v: z(&a.w_v),
                w_out: z(&a.w_out),
            }),
            gate: self.gate.as_ref().map(z),
            ln1_gain: z(&self.ln1_gain),
            ln1_bias: z(&self.ln1_bias),
            ffn: FfnParams {
                w_up: z(&self.ffn.w_up),
                w_down: z(&self.ffn.w_down),
            },
            ln2_gain: z(&self.ln2_gain),
            ln2_bias: z(&self.ln2_bias),
        }
    }

    /// `(name, tensor)` pairs in canonical order, names relative to the block.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("w_tcam", &self.w_tcam), ("gamma", &self.gamma)];
        if let Some(a) = &self.attn {
            v.extend([
                ("w_q", &a.w_q),
                ("w_k", &a.w_k),
                ("w_v", &a.w_v),
                ("w_out", &a.w_out),
            ]);
        }
        if let Some(g) = &self.gate {
            v.push(("gate", g));
        }
        v.extend([
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_up", &self.ffn.w_up),
            ("w_down", &self.ffn.w_down),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]);
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![("w_tcam", &mut self.w_tcam), ("gamma", &mut self.gamma)];
        if let Some(a) = &mut self.attn {
            v.extend([
                ("w_q", &mut a.w_q),
                ("w_k", &mut a.w_k),
                ("w_v", &mut a.w_v),
                ("w_out", &mut a.w_out),
            ]);
        }
        if let Some(g) = &mut self.gate {
            v.push(("gate", g));
        }
        v.extend([
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w_up", &mut self.ffn.w_up),
            ("w_down", &mut self.ffn.w_down),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
        ]);
        v
    }

    pub fn alphas(&self) -> Vec<T> {
        self.gamma.data().iter().map(|&g| sigmoid(g)).collect()
    }

    pub fn gate_value(&self) -> Option<T> {
        self.gate.as_ref().map(|g| sigmoid(g.data()[0]))
    }
}

/// Static shape and gating settings shared by all blocks of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub d_model: usize,
    pub heads: usize,
    pub window: usize,
    pub n_global: usize,
    pub ln_eps: f64,
    pub gating: Gating,
}

impl BlockSpec {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            d_model: cfg.d_model,
            heads: cfg.n_heads,
            window: cfg.window,
            n_global: cfg.n_global,
            ln_eps: cfg.ln_eps,
            gating: Gating::from_model(cfg),
        }
    }

    fn attention_shape(&self) -> AttentionShape {
        AttentionShape {
            heads: self.heads,
            window: self.window,
            n_global: self.n_global,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockTelemetry {
    pub sparsity_mid: f64,
    pub sparsity_ffn: f64,
    pub sparsity_out: f64,
    pub token_allzero_out: f64,
    pub gate: Option<f64>,
    pub alphas: Vec<f64>,
}

pub struct BlockOutput<T> {
    pub s_out: BinaryTensor,
    /// Downstream value of `s_out` (equal to it in hard mode).
    pub s_out_emitted: Tensor<T>,
    pub s_mid: BinaryTensor,
    pub s_ffn: BinaryTensor,
    pub c_out: Tensor<T>,
    pub telemetry: BlockTelemetry,
}

pub struct BlockCache<T> {
    s_in: Tensor<T>,
    z: Tensor<T>,
    alpha: Vec<T>,
    decay_states: Tensor<T>,
    attn: Option<(AttentionCache<T>, Tensor<T>)>,
    g: T,
    ln1: LayerNormCache<T>,
    ffn: FfnCache<T>,
    ln2: LayerNormCache<T>,
    out_gate: GateCache<T>,
}

pub(crate) fn zero_fraction(b: &BinaryTensor) -> f64 {
    if b.is_empty() {
        return 0.0;
    }
    1.0 - b.count_ones() as f64 / b.len() as f64
}

pub(crate) fn allzero_rows(b: &BinaryTensor) -> f64 {
    let rows = b.rows();
    if rows == 0 {
        return 0.0;
    }
    (0..rows).filter(|&r| b.row(r).iter().all(|&x| x == 0)).count() as f64 / rows as f64
}

/// Forward pass of one block. `s_in` carries the binary spikes (for the
/// position mask) and `s_in_emitted` their downstream values.
pub fn block_forward<T: Scalar>(
    spec: &BlockSpec,
    params: &BlockParams<T>,
    s_in: &BinaryTensor,
    s_in_emitted: &Tensor<T>,
    c_in: &Tensor<T>,
) -> Result<(BlockOutput<T>, BlockCache<T>)> {
    let (s, d) = (c_in.rows(), c_in.cols());
    if d != spec.d_model || s_in.shape() != [s, d] || s_in_emitted.shape() != [s, d] {
        return Err(Error::Dimension(format!(
            "block input shapes c {:?}, s {:?}, emitted {:?}",
            c_in.shape(),
            s_in.shape(),
            s_in_emitted.shape()
        )));
    }
    let heads = spec.heads;
    let dk = d / heads;

    let z = linear(s_in_emitted, &params.w_tcam)?;
    let alpha = params.alphas();
    let alpha_t = Tensor::from_raw(vec![heads], alpha.clone());
    let (states, _) = decay_aggregate(
        &z.clone().reshape(&[s, heads, dk])?,
        &alpha_t,
        &Tensor::zeros(&[heads, dk]),
    )?;
    let decay = states.reshape(&[s, d])?;

    let m = spike_position_mask(s_in);
    let (o, attn, g) = match (&params.attn, &params.gate) {
        (Some(ap), Some(wg)) => {
            let (a, cache) = attention_forward(c_in, m.data(), ap, spec.attention_shape())?;
            let o = fuse(&a, &decay, wg.data()[0])?;
            (o, Some((cache, a)), sigmoid(wg.data()[0]))
        }
        (None, None) => (decay.clone(), None, T::zero()),
        _ => {
            return Err(Error::Config(
                "attention parameters and fusion gate must be both present or both absent".into(),
            ))
        }
    };

    let mut r1 = c_in.clone();
    r1.add_assign(&o)?;
    let eps = T::lit(spec.ln_eps);
    let (c_mid, ln1) = layer_norm(&r1, &params.ln1_gain, &params.ln1_bias, eps)?;
    let mid = gate_forward(&spec.gating, &c_mid)?;

    let ffn = spiking_ffn(&c_mid, &params.ffn, &spec.gating)?;
    let mut r2 = c_mid.clone();
    r2.add_assign(&ffn.out)?;
    let (c_out, ln2) = layer_norm(&r2, &params.ln2_gain, &params.ln2_bias, eps)?;
    let out_gate = gate_forward(&spec.gating, &c_out)?;

    let telemetry = BlockTelemetry {
        sparsity_mid: zero_fraction(&mid.spikes),
        sparsity_ffn: zero_fraction(&ffn.spikes),
        sparsity_out: zero_fraction(&out_gate.spikes),
        token_allzero_out: allzero_rows(&out_gate.spikes),
        gate: params.gate_value().map(|v| v.as_f64()),
        alphas: alpha.iter().map(|a| a.as_f64()).collect(),
    };
    let output = BlockOutput {
        s_out: out_gate.spikes,
        s_out_emitted: out_gate.emitted,
        s_mid: mid.spikes,
        s_ffn: ffn.spikes,
        c_out,
        telemetry,
    };
    let cache = BlockCache {
        s_in: s_in_emitted.clone(),
        z,
        alpha,
        decay_states: decay,
        attn,
        g,
        ln1,
        ffn: ffn.cache,
        ln2,
        out_gate: out_gate.cache,
    };
    Ok((output, cache))
}

/// Backward pass of one block. Returns `(param grads, ∂L/∂c_in,
/// ∂L/∂s_in_emitted)`. `grad_s_out` may be `None` when `s_out` feeds nothing.
pub fn block_backward<T: Scalar>(
    spec: &BlockSpec,
    params: &BlockParams<T>,
    cache: &BlockCache<T>,
    grad_c_out: &Tensor<T>,
    grad_s_out: Option<&Tensor<T>>,
) -> Result<(BlockParams<T>, Tensor<T>, Tensor<T>)> {
    let mut grads = params.zeros_like();
    let heads = spec.heads;

    let mut dc_out = grad_c_out.clone();
    if let Some(gs) = grad_s_out {
        dc_out.add_assign(&gate_backward(&spec.gating, &cache.out_gate, gs)?)?;
    }
    let (dr2, dg2, db2) = layer_norm_backward(&cache.ln2, &params.ln2_gain, &dc_out)?;
    grads.ln2_gain = dg2;
    grads.ln2_bias = db2;

    let (mut dc_mid, dffn) = ffn_backward(&cache.ffn, &params.ffn, &spec.gating, &dr2)?;
    grads.ffn = dffn;
    dc_mid.add_assign(&dr2)?;

    let (dr1, dg1, db1) = layer_norm_backward(&cache.ln1, &params.ln1_gain, &dc_mid)?;
    grads.ln1_gain = dg1;
    grads.ln1_bias = db1;

    let mut dc_in = dr1.clone();
    let do_ = dr1;
    let ddecay = match (&cache.attn, &params.attn) {
        (Some((acache, a)), Some(ap)) => {
            let g = cache.g;
            let mut dattn = do_.clone();
            dattn.scale(g);
            let mut ddecay = do_.clone();
            ddecay.scale(T::one() - g);
            let dwg: T = do_
                .data()
                .iter()
                .zip(a.data().iter().zip(cache.decay_states.data()))
                .map(|(&o, (&av, &dv))| o * (av - dv))
                .sum::<T>()
                * g
                * (T::one() - g);
            grads.gate = Some(Tensor::scalar(dwg));
            let (dc_attn, dap) = attention_backward(acache, ap, spec.attention_shape(), &dattn)?;
            dc_in.add_assign(&dc_attn)?;
            grads.attn = Some(dap);
            ddecay
        }
        _ => do_,
    };

    let h0 = vec![T::zero(); spec.d_model];
    let (dz, dalpha, _) = decay_backward(
        &cache.z,
        &cache.alpha,
        &h0,
        &cache.decay_states,
        &ddecay,
        heads,
    );
    for (hi, (&da, &a)) in dalpha.iter().zip(&cache.alpha).enumerate() {
        grads.gamma.data_mut()[hi] = da * a * (T::one() - a);
    }
    let (ds_in, dw_tcam) = linear_backward(&cache.s_in, &params.w_tcam, &dz)?;
    grads.w_tcam = dw_tcam;
    Ok((grads, dc_in, ds_in))
}
