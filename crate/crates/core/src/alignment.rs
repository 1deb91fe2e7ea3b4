//! Cross-attention between the condition vector and decoder taps, the
//! progression mask, and the three training objectives.
//!
//! Each objective has a per-sample kernel (value and gradient) shared by the
//! plain `f32` API below and by the graph ops used during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, NodeId};
use crate::image::ImageGrid;
use crate::networks::{AttentionTap, ConditionVector, ModelParameters, Net};
use crate::tensor::{matmul, Real, Tensor};

/// Stabiliser in every cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;
/// Stabiliser of the per-row score normalisation.
pub const SCORE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_imax: f64,
    pub lambda_align: f64,
    pub lambda_mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_imax: 0.1, lambda_align: 1.0, lambda_mse: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda_imax", self.lambda_imax), ("lambda_align", self.lambda_align), ("lambda_mse", self.lambda_mse)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{k} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, imax: f64, align: f64, mse: f64) -> f64 {
        self.lambda_imax * imax + self.lambda_align * align + self.lambda_mse * mse
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgressionMask {
    pub h: usize,
    pub w: usize,
    pub full: Vec<f32>,
    /// `(h, w, values)` for each tap resolution.
    pub per_tap: Vec<(usize, usize, Vec<f32>)>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mse: f64,
    pub l_attn_align: f64,
    pub l_attn_imax: f64,
    pub total: f64,
    pub lambdas: LossWeights,
    pub skipped_alignment: bool,
}

impl LossBreakdown {
    pub fn new(imax: f64, align: f64, mse: f64, lambdas: LossWeights, skipped_alignment: bool) -> Self {
        Self {
            l_mse: mse,
            l_attn_align: align,
            l_attn_imax: imax,
            total: lambdas.combine(imax, align, mse),
            lambdas,
            skipped_alignment,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_mse.is_finite() && self.l_attn_align.is_finite() && self.l_attn_imax.is_finite() && self.total.is_finite()
    }
}

/// Row-wise softmax of a `rows × cols` matrix.
pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

struct AttnCache<T> {
    a: Vec<T>,
    z: Vec<T>,
    inv_sigma: Vec<T>,
}

/// Attention for one sample: `q` is `dp × dk`, `k` is `dk × s`.
fn attention_forward<T: Real>(q: &[T], k: &[T], dp: usize, dk: usize, s: usize) -> AttnCache<T> {
    let mut scores = vec![T::zero(); dp * s];
    matmul(dp, dk, s, q, false, k, false, &mut scores, false);
    let scale = T::one() / T::of(dk as f64).sqrt();
    let inv_s = T::one() / T::of(s as f64);
    let mut inv_sigma = Vec::with_capacity(dp);
    for row in scores.chunks_mut(s) {
        row.iter_mut().for_each(|v| *v *= scale);
        let mu = row.iter().copied().sum::<T>() * inv_s;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_s;
        let is = T::one() / (var + T::of(SCORE_NORM_EPS)).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mu) * is);
        inv_sigma.push(is);
    }
    let a = softmax_rows(&scores, s);
    AttnCache { a, z: scores, inv_sigma }
}

/// Gradients of one sample's attention with respect to `q` and `k`.
fn attention_backward<T: Real>(q: &[T], k: &[T], dp: usize, dk: usize, s: usize, ga: &[T]) -> (Vec<T>, Vec<T>) {
    let c = attention_forward(q, k, dp, dk, s);
    let scale = T::one() / T::of(dk as f64).sqrt();
    let inv_s = T::one() / T::of(s as f64);
    let mut ds = vec![T::zero(); dp * s];
    for i in 0..dp {
        let r = i * s..(i + 1) * s;
        let (a, z, g) = (&c.a[r.clone()], &c.z[r.clone()], &ga[r.clone()]);
        let dot: T = a.iter().zip(g).map(|(&a, &g)| a * g).sum();
        let dz: Vec<T> = a.iter().zip(g).map(|(&a, &g)| a * (g - dot)).collect();
        let mean_dz = dz.iter().copied().sum::<T>() * inv_s;
        let mean_dzz = dz.iter().zip(z).map(|(&d, &z)| d * z).sum::<T>() * inv_s;
        for j in 0..s {
            ds[i * s + j] = c.inv_sigma[i] * (dz[j] - mean_dz - z[j] * mean_dzz) * scale;
        }
    }
    let mut dq = vec![T::zero(); dp * dk];
    matmul(dp, s, dk, &ds, false, k, true, &mut dq, false);
    let mut dkk = vec![T::zero(); dk * s];
    matmul(dk, dp, s, q, true, &ds, false, &mut dkk, false);
    (dq, dkk)
}

struct CrossAttentionOp {
    dp: usize,
    dk: usize,
    s: usize,
}

impl<T: Real> CustomOp<T> for CrossAttentionOp {
    fn name(&self) -> &'static str {
        "cross_attention"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (qs, ks, a) = (self.dp * self.dk, self.dk * self.s, self.dp * self.s);
        let n = grad_out.len() / a;
        let mut gq = vec![T::zero(); n * qs];
        let mut gk = vec![T::zero(); n * ks];
        for i in 0..n {
            let (dq, dk) = attention_backward(
                &inputs[0][i * qs..(i + 1) * qs],
                &inputs[1][i * ks..(i + 1) * ks],
                self.dp,
                self.dk,
                self.s,
                &grad_out[i * a..(i + 1) * a],
            );
            gq[i * qs..(i + 1) * qs].copy_from_slice(&dq);
            gk[i * ks..(i + 1) * ks].copy_from_slice(&dk);
        }
        vec![needs[0].then_some(gq), needs[1].then_some(gk)]
    }
}

/// Records cross-attention for decoder layer `layer`: `z_prime (N, d′)`
/// and `features (N, d_k, h, w)` give `A (N, d′, h·w)`.
pub fn attention_node<'m, T: Real>(
    net: &Net<'m, T>,
    g: &mut Graph<'m, T>,
    z_prime: NodeId,
    features: NodeId,
    layer: usize,
) -> NodeId {
    let fs = g.shape(features).to_vec();
    let (n, dk, s) = (fs[0], fs[1], fs[2] * fs[3]);
    let dp = g.shape(z_prime)[1];
    let w = g.param(net.params.index_of(&format!("attn.q{layer}.w")));
    let b = g.param(net.params.index_of(&format!("attn.q{layer}.b")));
    let q = g.linear(z_prime, w, b);
    let mut value = Vec::with_capacity(n * dp * s);
    {
        let (qv, kv) = (g.value(q), g.value(features));
        for i in 0..n {
            let c = attention_forward(&qv[i * dp * dk..(i + 1) * dp * dk], &kv[i * dk * s..(i + 1) * dk * s], dp, dk, s);
            value.extend(c.a);
        }
    }
    g.custom(&[q, features], vec![n, dp, s], value, Box::new(CrossAttentionOp { dp, dk, s }))
}

/// `(1 − cos(ā, m), ∂/∂A)` where `ā` is the row mean of `a (dp × s)`.
fn align_kernel<T: Real>(a: &[T], m: &[T], dp: usize) -> (T, Vec<T>) {
    let s = m.len();
    let inv_dp = T::one() / T::of(dp as f64);
    let mut abar = vec![T::zero(); s];
    for row in a.chunks(s) {
        for (b, &v) in abar.iter_mut().zip(row) {
            *b += v * inv_dp;
        }
    }
    let p: T = abar.iter().zip(m).map(|(&x, &y)| x * y).sum();
    let na = abar.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nm = m.iter().map(|&x| x * x).sum::<T>().sqrt();
    let den = na * nm + T::of(COSINE_EPS);
    let cos = p / den;
    let mut grad = vec![T::zero(); dp * s];
    for j in 0..s {
        let mut dcos = m[j] / den;
        if na > T::zero() {
            dcos -= p * nm * abar[j] / (na * den * den);
        }
        let gj = -dcos * inv_dp;
        for i in 0..dp {
            grad[i * s + j] = gj;
        }
    }
    (T::one() - cos, grad)
}

/// `(Σ_{i≠j} cos²(rᵢ, rⱼ), ∂/∂A)` over the rows of `a (dp × s)`.
fn imax_kernel<T: Real>(a: &[T], dp: usize, s: usize) -> (T, Vec<T>) {
    let mut gram = vec![T::zero(); dp * dp];
    matmul(dp, s, dp, a, false, a, true, &mut gram, false);
    let norms: Vec<T> = (0..dp).map(|i| gram[i * dp + i].max(T::zero()).sqrt()).collect();
    let eps = T::of(COSINE_EPS);
    let four = T::of(4.0);
    let mut total = T::zero();
    let mut coef = vec![T::zero(); dp * dp];
    for i in 0..dp {
        for j in 0..dp {
            if i == j {
                continue;
            }
            let p = gram[i * dp + j];
            let den = norms[i] * norms[j] + eps;
            let c = p / den;
            total += c * c;
            // Both ordered pairs (i,j) and (j,i) contribute 2c·∂c/∂rᵢ.
            coef[i * dp + j] += four * c / den;
            if norms[i] > T::zero() {
                coef[i * dp + i] -= four * c * p * norms[j] / (norms[i] * den * den);
            }
        }
    }
    let mut grad = vec![T::zero(); dp * s];
    matmul(dp, dp, s, &coef, false, a, false, &mut grad, false);
    (total, grad)
}

fn mse_kernel<T: Real>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    let inv = T::one() / T::of(pred.len() as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        loss += d * d;
        grad.push(T::of(2.0) * d * inv);
    }
    (loss * inv, grad)
}

/// Weighted batch sum of `(1/L)·Σ_l (1 − cos)`; `masks[n][l]` are ignored
/// where `weights[n] == 0`.
struct AlignOp<T> {
    masks: Vec<Vec<Vec<T>>>,
    weights: Vec<T>,
    dp: usize,
}

impl<T: Real> CustomOp<T> for AlignOp<T> {
    fn name(&self) -> &'static str {
        "attention_alignment_loss"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let inv_l = T::one() / T::of(inputs.len() as f64);
        inputs
            .iter()
            .enumerate()
            .map(|(l, a)| {
                if !needs[l] {
                    return None;
                }
                let per = a.len() / self.weights.len();
                let mut g = vec![T::zero(); a.len()];
                for (n, &w) in self.weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let (_, gn) = align_kernel(&a[n * per..(n + 1) * per], &self.masks[n][l], self.dp);
                    let scale = grad_out[0] * w * inv_l;
                    g[n * per..(n + 1) * per].iter_mut().zip(gn).for_each(|(x, v)| *x = v * scale);
                }
                Some(g)
            })
            .collect()
    }
}

struct ImaxOp<T> {
    weights: Vec<T>,
    dp: usize,
}

impl<T: Real> CustomOp<T> for ImaxOp<T> {
    fn name(&self) -> &'static str {
        "attention_imax_loss"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let inv_l = T::one() / T::of(inputs.len() as f64);
        inputs
            .iter()
            .enumerate()
            .map(|(l, a)| {
                if !needs[l] {
                    return None;
                }
                let per = a.len() / self.weights.len();
                let mut g = vec![T::zero(); a.len()];
                for (n, &w) in self.weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let (_, gn) = imax_kernel(&a[n * per..(n + 1) * per], self.dp, per / self.dp);
                    let scale = grad_out[0] * w * inv_l;
                    g[n * per..(n + 1) * per].iter_mut().zip(gn).for_each(|(x, v)| *x = v * scale);
                }
                Some(g)
            })
            .collect()
    }
}

struct MseOp<T> {
    target: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> CustomOp<T> for MseOp<T> {
    fn name(&self) -> &'static str {
        "reconstruction_loss"
    }

    fn backward(&self, inputs: &[&[T]], _: &[T], grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let pred = inputs[0];
        let per = pred.len() / self.weights.len();
        let mut g = vec![T::zero(); pred.len()];
        for (n, &w) in self.weights.iter().enumerate() {
            let r = n * per..(n + 1) * per;
            let (_, gn) = mse_kernel(&pred[r.clone()], &self.target[r.clone()]);
            g[r].iter_mut().zip(gn).for_each(|(x, v)| *x = v * w * grad_out[0]);
        }
        vec![Some(g)]
    }
}

/// Per-sample description of which loss terms apply.
#[derive(Debug, Clone)]
pub struct SampleTerms<'a> {
    pub target: &'a [f32],
    /// Mask for the alignment term; `None` skips it.
    pub mask: Option<&'a ProgressionMask>,
    /// Whether the attention terms (imax, and alignment if masked) apply.
    pub attention: bool,
}

/// Loss nodes of one batch plus the per-sample component values.
pub struct BatchLoss {
    pub total: NodeId,
    pub per_sample: Vec<LossBreakdown>,
}

/// Builds the batch-mean objective
/// `(1/N)·Σ_n [λ1·imax_n + λ2·align_n + λ3·mse_n]` on top of `attention`
/// nodes (one per supervised tap, each `(N, d′, s_l)`) and `x0_hat`.
pub fn batch_loss<T: Real>(
    g: &mut Graph<'_, T>,
    attention: &[NodeId],
    x0_hat: NodeId,
    samples: &[SampleTerms<'_>],
    lambdas: LossWeights,
) -> BatchLoss {
    let n = samples.len();
    let inv_n = 1.0 / n as f64;
    let dp = g.shape(attention[0])[1];
    let inv_l = 1.0 / attention.len() as f64;

    let mut per_sample = Vec::with_capacity(n);
    let mut align_w = Vec::with_capacity(n);
    let mut imax_w = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let (mut align_total, mut imax_total, mut mse_total) = (0.0, 0.0, 0.0);
    let pred = g.value(x0_hat).to_vec();
    let per_px = pred.len() / n;
    let mut target = Vec::with_capacity(pred.len());
    for (i, smp) in samples.iter().enumerate() {
        target.extend(smp.target.iter().map(|&v| T::of(v as f64)));
        let (mse, _) = mse_kernel(&pred[i * per_px..(i + 1) * per_px], &target[i * per_px..]);
        let mse = mse.as_f64();
        let mut imax = 0.0;
        let mut align = 0.0;
        let use_align = smp.attention && smp.mask.map_or(false, |m| !m.degenerate);
        let mut sample_masks = Vec::new();
        if smp.attention {
            for (l, &node) in attention.iter().enumerate() {
                let s = g.shape(node)[2];
                let a = &g.value(node)[i * dp * s..(i + 1) * dp * s];
                imax += imax_kernel(a, dp, s).0.as_f64() * inv_l;
                if use_align {
                    let m: Vec<T> = smp.mask.unwrap().per_tap[l].2.iter().map(|&v| T::of(v as f64)).collect();
                    align += align_kernel(a, &m, dp).0.as_f64() * inv_l;
                    sample_masks.push(m);
                }
            }
        }
        align_w.push(T::of(if use_align { inv_n } else { 0.0 }));
        imax_w.push(T::of(if smp.attention { inv_n } else { 0.0 }));
        masks.push(sample_masks);
        align_total += align * inv_n;
        imax_total += imax * inv_n;
        mse_total += mse * inv_n;
        per_sample.push(LossBreakdown::new(imax, align, mse, lambdas, smp.attention && !use_align));
    }

    let mse_node = g.custom(
        &[x0_hat],
        vec![1],
        vec![T::of(mse_total)],
        Box::new(MseOp { target, weights: vec![T::of(inv_n); n] }),
    );
    let mut terms = vec![(mse_node, T::of(lambdas.lambda_mse))];
    if lambdas.lambda_imax != 0.0 {
        let node = g.custom(attention, vec![1], vec![T::of(imax_total)], Box::new(ImaxOp { weights: imax_w, dp }));
        terms.push((node, T::of(lambdas.lambda_imax)));
    }
    if lambdas.lambda_align != 0.0 {
        let node = g.custom(attention, vec![1], vec![T::of(align_total)], Box::new(AlignOp { masks, weights: align_w, dp }));
        terms.push((node, T::of(lambdas.lambda_align)));
    }
    let total = g.weighted_sum(&terms);
    BatchLoss { total, per_sample }
}

pub fn compute_cross_attention(
    z_prime: &ConditionVector,
    tap: &AttentionTap,
    params: &ModelParameters<f32>,
) -> Result<AttentionTap> {
    let dp = params.config.d_prime;
    if z_prime.values.len() != dp {
        return Err(Error::ShapeMismatch(format!("condition has {} values, expected {dp}", z_prime.values.len())));
    }
    let name = format!("attn.q{}", tap.layer_index);
    if !params.names().iter().any(|n| n == &format!("{name}.w")) {
        return Err(Error::InvalidArgument(format!("no query projection for layer {}", tap.layer_index)));
    }
    let want = params.get(&format!("{name}.w")).shape[0] / dp;
    if tap.d_k != want || tap.features.len() != tap.d_k * tap.s() {
        return Err(Error::ShapeMismatch(format!("tap {} has d_k {} (projection expects {want})", tap.layer_index, tap.d_k)));
    }
    let net = Net::new(params);
    let mut g = net.graph();
    let z = g.input(Tensor::new(vec![1, dp], z_prime.values.clone()));
    let k = g.input(Tensor::new(vec![1, tap.d_k, tap.h, tap.w], tap.features.clone()));
    let a = attention_node(&net, &mut g, z, k, tap.layer_index);
    Ok(AttentionTap { attention: Some(g.value(a).to_vec()), ..tap.clone() })
}

fn pool_mask(full: &[f32], h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<f32>> {
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::ShapeMismatch(format!("cannot pool a {h}x{w} mask to {th}x{tw}")));
    }
    let (fy, fx) = (h / th, w / tw);
    let inv = 1.0 / (fy * fx) as f64;
    let mut out = Vec::with_capacity(th * tw);
    for ty in 0..th {
        for tx in 0..tw {
            let mut acc = 0.0f64;
            for y in ty * fy..(ty + 1) * fy {
                for x in tx * fx..(tx + 1) * fx {
                    acc += full[y * w + x] as f64;
                }
            }
            out.push(acc * inv);
        }
    }
    let max = out.iter().copied().fold(0.0, f64::max);
    Ok(out.into_iter().map(|v| if max > 0.0 { (v / max) as f32 } else { 0.0 }).collect())
}

pub fn build_progression_mask(x_b: &ImageGrid, x_f: &ImageGrid, tap_shapes: &[(usize, usize)]) -> Result<ProgressionMask> {
    x_b.ensure_same_shape(x_f)?;
    let diff: Vec<f32> = x_f.pixels.iter().zip(&x_b.pixels).map(|(f, b)| (f - b).abs()).collect();
    let max = diff.iter().copied().fold(0.0f32, f32::max);
    let degenerate = max == 0.0;
    let full: Vec<f32> = if degenerate { diff } else { diff.iter().map(|v| (v / max).min(1.0)).collect() };
    let per_tap = tap_shapes
        .iter()
        .map(|&(th, tw)| Ok((th, tw, pool_mask(&full, x_b.h, x_b.w, th, tw)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProgressionMask { h: x_b.h, w: x_b.w, full, per_tap, degenerate })
}

fn filled_attention(tap: &AttentionTap) -> Result<Vec<f64>> {
    let a = tap.attention.as_ref().ok_or_else(|| Error::InvalidArgument(format!("tap {} has no attention map", tap.layer_index)))?;
    if a.is_empty() || a.len() % tap.s() != 0 {
        return Err(Error::ShapeMismatch(format!("tap {} attention size {} is not a multiple of {}", tap.layer_index, a.len(), tap.s())));
    }
    Ok(a.iter().map(|&v| v as f64).collect())
}

pub fn attention_alignment_loss(taps: &[AttentionTap], mask: &ProgressionMask) -> Result<f64> {
    if mask.degenerate {
        return Err(Error::InvalidArgument("degenerate progression mask; alignment term must be skipped".into()));
    }
    if taps.is_empty() || taps.len() > mask.per_tap.len() {
        return Err(Error::ShapeMismatch(format!("{} taps for {} mask levels", taps.len(), mask.per_tap.len())));
    }
    let mut total = 0.0;
    for (l, tap) in taps.iter().enumerate() {
        let a = filled_attention(tap)?;
        let (mh, mw, m) = &mask.per_tap[l];
        if (*mh, *mw) != (tap.h, tap.w) {
            return Err(Error::ShapeMismatch(format!("mask level {l} is {mh}x{mw}, tap is {}x{}", tap.h, tap.w)));
        }
        let m: Vec<f64> = m.iter().map(|&v| v as f64).collect();
        total += align_kernel(&a, &m, a.len() / tap.s()).0;
    }
    Ok(total / taps.len() as f64)
}

pub fn attention_imax_loss(taps: &[AttentionTap]) -> Result<f64> {
    if taps.is_empty() {
        return Err(Error::InvalidArgument("no taps".into()));
    }
    let mut total = 0.0;
    for tap in taps {
        let a = filled_attention(tap)?;
        let dp = a.len() / tap.s();
        if dp < 2 {
            return Err(Error::InvalidArgument("information maximisation needs at least two channels".into()));
        }
        total += imax_kernel(&a, dp, tap.s()).0;
    }
    Ok(total / taps.len() as f64)
}

pub fn reconstruction_loss(x_f: &ImageGrid, x0_hat: &ImageGrid) -> Result<f64> {
    x_f.ensure_same_shape(x0_hat)?;
    let a: Vec<f64> = x0_hat.pixels.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = x_f.pixels.iter().map(|&v| v as f64).collect();
    Ok(mse_kernel(&a, &b).0)
}

pub fn total_loss(
    taps: &[AttentionTap],
    mask: &ProgressionMask,
    x_f: &ImageGrid,
    x0_hat: &ImageGrid,
    lambdas: LossWeights,
) -> Result<LossBreakdown> {
    lambdas.validate().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mse = reconstruction_loss(x_f, x0_hat)?;
    let imax = attention_imax_loss(taps)?;
    let (align, skipped) = if mask.degenerate { (0.0, true) } else { (attention_alignment_loss(taps, mask)?, false) };
    Ok(LossBreakdown::new(imax, align, mse, lambdas, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{init_parameters, ArchConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tap(h: usize, w: usize, rows: Vec<Vec<f32>>) -> AttentionTap {
        AttentionTap { layer_index: 0, h, w, d_k: 1, features: vec![0.0; h * w], attention: Some(rows.concat()) }
    }

    fn mask_of(levels: Vec<(usize, usize, Vec<f32>)>) -> ProgressionMask {
        ProgressionMask { h: 1, w: 1, full: vec![1.0], per_tap: levels, degenerate: false }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    #[test]
    fn softmax_hand_example() {
        let a = softmax_rows(&[0.0f64, 3f64.ln()], 2);
        assert!((a[0] - 0.25).abs() < 1e-12 && (a[1] - 0.75).abs() < 1e-12);
    }

    fn toy_params() -> ModelParameters<f32> {
        let cfg = ArchConfig {
            image_size: 8,
            base_channels: 4,
            d: 8,
            d_prime: 3,
            age_bins: 4,
            norm_groups: 2,
            time_embed_dim: 6,
            cond_hidden: 5,
            ..ArchConfig::default()
        };
        init_parameters(&cfg, 11).unwrap()
    }

    #[test]
    fn zero_projection_and_constant_keys_give_uniform_attention() {
        let mut p = toy_params();
        let features: Vec<f32> = (0..16 * 8).map(|i| (i as f32 * 0.3).sin()).collect();
        let t = AttentionTap { layer_index: 1, h: 4, w: 4, d_k: 8, features, attention: None };
        let z = ConditionVector { values: vec![0.4, -1.0, 2.0] };
        let varied = compute_cross_attention(&z, &t, &p).unwrap().attention.unwrap();
        assert!(varied.iter().any(|&v| (v - 1.0 / 16.0).abs() > 1e-4));
        for row in varied.chunks(16) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }

        let constant = AttentionTap { features: (0..8).flat_map(|c| vec![c as f32; 16]).collect(), ..t.clone() };
        let a = compute_cross_attention(&z, &constant, &p).unwrap().attention.unwrap();
        assert!(a.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-6));

        p.get_mut("attn.q1.w").data.iter_mut().for_each(|v| *v = 0.0);
        let a = compute_cross_attention(&z, &t, &p).unwrap().attention.unwrap();
        assert_eq!(a.len(), 3 * 16);
        assert!(a.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-6));
    }

    #[test]
    fn cross_attention_rejects_mismatched_tap() {
        let p = toy_params();
        let z = ConditionVector { values: vec![0.0; 3] };
        let t = AttentionTap { layer_index: 1, h: 4, w: 4, d_k: 5, features: vec![0.0; 80], attention: None };
        assert!(compute_cross_attention(&z, &t, &p).is_err());
        let t = AttentionTap { layer_index: 9, h: 4, w: 4, d_k: 8, features: vec![0.0; 128], attention: None };
        assert!(compute_cross_attention(&z, &t, &p).is_err());
    }

    fn img(h: usize, w: usize, p: Vec<f32>) -> ImageGrid {
        ImageGrid::new(h, w, p).unwrap()
    }

    #[test]
    fn mask_examples() {
        let x = img(4, 4, (0..16).map(|i| i as f32 / 16.0).collect());
        let m = build_progression_mask(&x, &x, &[(2, 2)]).unwrap();
        assert!(m.degenerate && m.full.iter().all(|&v| v == 0.0));

        let y = img(4, 4, x.pixels.iter().map(|v| v + 0.0625).collect());
        let m = build_progression_mask(&x, &y, &[(2, 2), (4, 4)]).unwrap();
        assert!(!m.degenerate && m.full.iter().all(|&v| (v - 1.0).abs() < 1e-6));

        let b = img(4, 4, vec![0.0; 16]);
        let mut f = vec![0.0; 16];
        for yy in 0..2 {
            for xx in 0..2 {
                f[yy * 4 + xx] = 0.8;
            }
        }
        let m = build_progression_mask(&b, &img(4, 4, f), &[(2, 2)]).unwrap();
        assert_eq!(m.per_tap[0].2, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(build_progression_mask(&b, &img(2, 2, vec![0.0; 4]), &[(1, 1)]).is_err());
        assert!(build_progression_mask(&b, &b, &[(3, 3)]).is_err());
    }

    #[test]
    fn alignment_examples() {
        let m = vec![0.0, 1.0, 0.5, 0.0];
        let parallel = tap(2, 2, vec![vec![0.0, 0.2, 0.1, 0.0], vec![0.0, 0.6, 0.3, 0.0]]);
        let ortho = tap(2, 2, vec![vec![0.7, 0.0, 0.0, 0.3], vec![0.5, 0.0, 0.0, 0.5]]);
        let mask = mask_of(vec![(2, 2, m.clone()), (2, 2, m.clone())]);
        let l = attention_alignment_loss(&[parallel.clone(), parallel.clone()], &mask).unwrap();
        assert!(l.abs() < 1e-6);
        let l = attention_alignment_loss(&[ortho.clone(), ortho.clone()], &mask).unwrap();
        assert!((l - 1.0).abs() < 1e-9);
        let l = attention_alignment_loss(&[parallel.clone(), ortho], &mask).unwrap();
        assert!((l - 0.5).abs() < 1e-6);
        let degenerate = ProgressionMask { degenerate: true, ..mask };
        assert!(attention_alignment_loss(&[parallel], &degenerate).is_err());
    }

    #[test]
    fn imax_examples() {
        let same = tap(1, 3, vec![vec![0.2, 0.3, 0.5], vec![0.2, 0.3, 0.5]]);
        assert!((attention_imax_loss(&[same]).unwrap() - 2.0).abs() < 1e-6);
        let ortho = tap(1, 3, vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!(attention_imax_loss(&[ortho]).unwrap().abs() < 1e-12);
        let diag = tap(1, 2, vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
        assert!((attention_imax_loss(&[diag]).unwrap() - 1.0).abs() < 1e-6);
        let single = tap(1, 2, vec![vec![0.5, 0.5]]);
        assert!(attention_imax_loss(&[single]).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let a = img(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let b = ImageGrid { pixels: a.pixels.iter().map(|v| v + 0.25).collect(), clean: false, ..a.clone() };
        assert!((reconstruction_loss(&a, &b).unwrap() - 0.0625).abs() < 1e-7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let q: Vec<f32> = (0..64).map(|_| rng.gen()).collect();
        let mut oracle = 0.0f64;
        for i in 0..64 {
            oracle += (p[i] as f64 - q[i] as f64).powi(2);
        }
        oracle /= 64.0;
        let got = reconstruction_loss(&img(8, 8, p), &img(8, 8, q)).unwrap();
        assert!((got - oracle).abs() < 1e-10);
        assert!(reconstruction_loss(&a, &img(3, 2, vec![0.0; 6])).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights { lambda_imax: 0.1, lambda_align: 1.0, lambda_mse: 1.0 };
        assert!((LossBreakdown::new(2.0, 0.5, 0.01, w, false).total - 0.71).abs() < 1e-12);

        let m = vec![0.0, 1.0, 0.5, 0.0];
        let parallel = tap(2, 2, vec![vec![0.0, 0.2, 0.1, 0.0], vec![0.0, 0.6, 0.3, 0.0]]);
        let mask = mask_of(vec![(2, 2, m)]);
        let x = img(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let y = img(2, 2, vec![0.2, 0.2, 0.3, 0.4]);
        let only_mse = LossWeights { lambda_imax: 0.0, lambda_align: 0.0, lambda_mse: 1.0 };
        let b = total_loss(&[parallel.clone()], &mask, &x, &y, only_mse).unwrap();
        assert_eq!(b.total, b.l_mse);
        let only_align = LossWeights { lambda_imax: 0.0, lambda_align: 1.0, lambda_mse: 0.0 };
        let b = total_loss(&[parallel.clone()], &mask, &x, &y, only_align).unwrap();
        assert!(b.total.abs() < 1e-6);
        let degenerate = ProgressionMask { degenerate: true, ..mask };
        let b = total_loss(&[parallel], &degenerate, &x, &y, w).unwrap();
        assert!(b.skipped_alignment && b.l_attn_align == 0.0 && b.l_attn_imax > 0.0 && b.l_mse > 0.0);
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn check(analytic: &[f64], f: impl Fn(usize, f64) -> f64, n: usize) {
        let h = 1e-6;
        for i in 0..n {
            let fd = (f(i, h) - f(i, -h)) / (2.0 * h);
            assert!(rel(analytic[i], fd) < 1e-4 || (analytic[i] - fd).abs() < 1e-8, "coord {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (dp, s) = (3, 5);
        let a = rand_vec(&mut rng, dp * s, 0.01, 1.0);
        let m = rand_vec(&mut rng, s, 0.0, 1.0);
        let (_, g) = align_kernel(&a, &m, dp);
        check(&g, |i, h| { let mut b = a.clone(); b[i] += h; align_kernel(&b, &m, dp).0 }, a.len());
        let (_, g) = imax_kernel(&a, dp, s);
        check(&g, |i, h| { let mut b = a.clone(); b[i] += h; imax_kernel(&b, dp, s).0 }, a.len());
        let t = rand_vec(&mut rng, 7, 0.0, 1.0);
        let p = rand_vec(&mut rng, 7, 0.0, 1.0);
        let (_, g) = mse_kernel(&p, &t);
        check(&g, |i, h| { let mut b = p.clone(); b[i] += h; mse_kernel(&b, &t).0 }, p.len());
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (dp, dk, s) = (3, 4, 6);
        let q = rand_vec(&mut rng, dp * dk, -1.0, 1.0);
        let k = rand_vec(&mut rng, dk * s, -1.0, 1.0);
        let ga = rand_vec(&mut rng, dp * s, -1.0, 1.0);
        let obj = |q: &[f64], k: &[f64]| {
            attention_forward(q, k, dp, dk, s).a.iter().zip(&ga).map(|(a, g)| a * g).sum::<f64>()
        };
        let (dq, dkk) = attention_backward(&q, &k, dp, dk, s, &ga);
        check(&dq, |i, h| { let mut b = q.clone(); b[i] += h; obj(&b, &k) }, q.len());
        check(&dkk, |i, h| { let mut b = k.clone(); b[i] += h; obj(&q, &b) }, k.len());
    }

    proptest! {
        #[test]
        fn attention_rows_are_distributions(seed in 0u64..1000, dk in 1usize..6, s in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_vec(&mut rng, 4 * dk, -5.0, 5.0);
            let k = rand_vec(&mut rng, dk * s, -5.0, 5.0);
            let a = attention_forward(&q, &k, 4, dk, s).a;
            for row in a.chunks(s) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }

        #[test]
        fn loss_bounds_and_mask_scale_invariance(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (dp, s) = (4, 9);
            let a = softmax_rows(&rand_vec(&mut rng, dp * s, -3.0, 3.0), s);
            let m = rand_vec(&mut rng, s, 0.0, 1.0);
            let l = align_kernel(&a, &m, dp).0;
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&l));
            let ms: Vec<f64> = m.iter().map(|v| v * scale).collect();
            prop_assert!((align_kernel(&a, &ms, dp).0 - l).abs() < 1e-6);
            let i = imax_kernel(&a, dp, s).0;
            prop_assert!(i >= 0.0 && i <= (dp * (dp - 1)) as f64 + 1e-9);
        }

        #[test]
        fn total_matches_weighted_components(i in 0.0f64..12.0, a in 0.0f64..1.0, m in 0.0f64..1.0,
                                             l1 in 0.0f64..2.0, l2 in 0.0f64..2.0, l3 in 0.0f64..2.0) {
            let w = LossWeights { lambda_imax: l1, lambda_align: l2, lambda_mse: l3 };
            let b = LossBreakdown::new(i, a, m, w, false);
            prop_assert!((b.total - (l1 * i + l2 * a + l3 * m)).abs() < 1e-12);
        }
    }
}
