//! A small reverse-mode autodiff tape specialised to the layers the
//! diffusion auto-encoder needs (NCHW convolutions, group norm, affine
//! modulation, linear maps). Layers that carry model-specific math, such as
//! cross-attention and the alignment objectives, plug in through [`CustomOp`]
//! with hand-derived backward passes.

use std::collections::HashMap;

use crate::tensor::{matmul, Real, Tensor};

pub type NodeId = usize;

/// A differentiable operation whose forward value is computed by the caller.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input; `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&[T]],
        output: &[T],
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Input,
    Param(usize),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, k: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, stats: Vec<(T, T)> },
    Silu(NodeId),
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    AvgPool2(NodeId),
    Upsample2(NodeId),
    Modulate { x: NodeId, ss: NodeId },
    GlobalAvgPool(NodeId),
    PrefixAdd { a: NodeId, b: NodeId },
    Mean(NodeId),
    WeightedSum(Vec<(NodeId, T)>),
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded computation.
///
/// Parameter leaves borrow their values from the parameter store, so
/// building a graph never copies weights.
pub struct Graph<'p, T: Real> {
    params: &'p [Tensor<T>],
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, NodeId>,
}

/// Result of [`Graph::backward`]: the gradient of the scalar root with
/// respect to every node that required one.
pub struct Gradients<T> {
    node_grads: Vec<Option<Vec<T>>>,
    param_of_node: Vec<(usize, NodeId)>,
}

impl<T: Real> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&[T]> {
        self.node_grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradients indexed by parameter index; parameters that did not take
    /// part in the forward pass get `None`.
    pub fn params(&self, n_params: usize) -> Vec<Option<Vec<T>>> {
        let mut out = vec![None; n_params];
        for &(p, node) in &self.param_of_node {
            out[p] = self.node_grads[node].clone();
        }
        out
    }
}

fn silu<T: Real>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

fn silu_grad<T: Real>(v: T) -> T {
    let s = T::one() / (T::one() + (-v).exp());
    s * (T::one() + v * (T::one() - s))
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let sx = xo as isize + kx as isize - p as isize;
                        *d = if sx < 0 || sx >= w as isize { T::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, &g) in src.iter().enumerate() {
                        let sx = xo as isize + kx as isize - p as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        match self.nodes[id].op {
            Op::Param(p) => &self.params[p].data,
            _ => &self.nodes[id].value,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t.shape, t.data, Op::Input, false)
    }

    /// A leaf whose gradient is tracked (used to differentiate with respect
    /// to intermediate quantities in tests and diagnostics).
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t.shape, t.data, Op::Input, true)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&index) {
            return id;
        }
        let shape = self.params[index].shape.clone();
        let id = self.push(shape, Vec::new(), Op::Param(index), true);
        self.param_nodes.insert(index, id);
        id
    }

    /// 2-D convolution, stride 1, "same" zero padding, odd square kernel.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d: input channels");
        assert_eq!(k % 2, 1, "conv2d: odd kernel");
        let hw = h * wd;
        let ck = c * k * k;
        let mut out = vec![T::zero(); n * co * hw];
        let mut cols = vec![T::zero(); if k == 1 { 0 } else { ck * hw }];
        let wv = self.value(w);
        let bv = self.value(b);
        let xv = self.value(x);
        for ni in 0..n {
            let xi = &xv[ni * c * hw..(ni + 1) * c * hw];
            let oi = &mut out[ni * co * hw..(ni + 1) * co * hw];
            for (o, &bias) in bv.iter().enumerate() {
                oi[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = bias);
            }
            if k == 1 {
                matmul(co, ck, hw, wv, false, xi, false, oi, true);
            } else {
                im2col(xi, c, h, wd, k, &mut cols);
                matmul(co, ck, hw, wv, false, &cols, false, oi, true);
            }
        }
        let ng = self.needs(&[x, w, b]);
        self.push(vec![n, co, h, wd], out, Op::Conv2d { x, w, b, k }, ng)
    }

    /// `y = x·Wᵀ + b` for `x` of shape `(N, in)` and `W` of shape `(out, in)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let n = self.shape(x)[0];
        let fin = self.value(x).len() / n;
        let ws = self.shape(w).to_vec();
        let fo = ws[0];
        assert_eq!(ws[1], fin, "linear: input features");
        let mut out = vec![T::zero(); n * fo];
        let bv = self.value(b);
        for ni in 0..n {
            out[ni * fo..(ni + 1) * fo].copy_from_slice(bv);
        }
        matmul(n, fin, fo, self.value(x), false, self.value(w), true, &mut out, true);
        let ng = self.needs(&[x, w, b]);
        self.push(vec![n, fo], out, Op::Linear { x, w, b }, ng)
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let hw: usize = xs[2..].iter().product();
        assert_eq!(c % groups, 0, "group_norm: channels divisible by groups");
        let cg = c / groups;
        let m = T::of((cg * hw) as f64);
        let eps = T::of(1e-5);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(n * groups);
        for ni in 0..n {
            for g in 0..groups {
                let start = (ni * c + g * cg) * hw;
                let seg = &xv[start..start + cg * hw];
                let mean = seg.iter().copied().sum::<T>() / m;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                let rstd = T::one() / (var + eps).sqrt();
                stats.push((mean, rstd));
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let off = start + cc * hw;
                    for i in 0..hw {
                        out[off + i] = (xv[off + i] - mean) * rstd * ga + be;
                    }
                }
            }
        }
        let ng = self.needs(&[x, gamma, beta]);
        self.push(xs, out, Op::GroupNorm { x, gamma, beta, groups, stats }, ng)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| silu(v)).collect();
        let ng = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Silu(x), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let ng = self.needs(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    /// Concatenation along dimension 1; trailing dimensions must agree.
    pub fn concat(&mut self, ids: &[NodeId]) -> NodeId {
        let first = self.shape(ids[0]).to_vec();
        let n = first[0];
        let rest: Vec<usize> = first[2..].to_vec();
        let mut channels = 0;
        for &id in ids {
            let s = self.shape(id);
            assert_eq!(s[0], n, "concat: batch");
            assert_eq!(&s[2..], &rest[..], "concat: trailing dims");
            channels += s[1];
        }
        let total: usize = ids.iter().map(|&i| self.value(i).len()).sum();
        let mut out = Vec::with_capacity(total);
        for ni in 0..n {
            for &id in ids {
                let v = self.value(id);
                let per = v.len() / n;
                out.extend_from_slice(&v[ni * per..(ni + 1) * per]);
            }
        }
        let mut shape = vec![n, channels];
        shape.extend(rest);
        let ng = self.needs(ids);
        self.push(shape, out, Op::Concat(ids.to_vec()), ng)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: even spatial size");
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let q = T::of(0.25);
        let mut out = vec![T::zero(); nc * ho * wo];
        for p in 0..nc {
            let src = &xv[p * h * w..];
            for y in 0..ho {
                for xo in 0..wo {
                    let i = 2 * y * w + 2 * xo;
                    out[p * ho * wo + y * wo + xo] =
                        (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(vec![xs[0], xs[1], ho, wo], out, Op::AvgPool2(x), ng)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x);
        let mut out = vec![T::zero(); nc * ho * wo];
        for p in 0..nc {
            for y in 0..ho {
                for xo in 0..wo {
                    out[p * ho * wo + y * wo + xo] = xv[p * h * w + (y / 2) * w + xo / 2];
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(vec![xs[0], xs[1], ho, wo], out, Op::Upsample2(x), ng)
    }

    /// Per-channel affine modulation `x·(1 + scale) + shift`, where `ss`
    /// has shape `(N, 2C)` holding scales then shifts.
    pub fn modulate(&mut self, x: NodeId, ss: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let hw: usize = xs[2..].iter().product();
        assert_eq!(self.shape(ss), &[n, 2 * c], "modulate: scale/shift shape");
        let xv = self.value(x);
        let sv = self.value(ss);
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ch in 0..c {
                let s = T::one() + sv[ni * 2 * c + ch];
                let t = sv[ni * 2 * c + c + ch];
                let off = (ni * c + ch) * hw;
                for i in 0..hw {
                    out[off + i] = xv[off + i] * s + t;
                }
            }
        }
        let ng = self.needs(&[x, ss]);
        self.push(xs, out, Op::Modulate { x, ss }, ng)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let hw: usize = xs[2..].iter().product();
        let inv = T::one() / T::of(hw as f64);
        let xv = self.value(x);
        let out = (0..n * c).map(|p| xv[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv).collect();
        let ng = self.needs(&[x]);
        self.push(vec![n, c], out, Op::GlobalAvgPool(x), ng)
    }

    /// `a + [b; 0]`: adds `b (N, d′)` onto the first `d′` features of `a (N, d)`.
    pub fn prefix_add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[0], sb[0], "prefix_add: batch");
        let (d, dp) = (sa[1], sb[1]);
        assert!(dp <= d, "prefix_add: prefix wider than target");
        let mut out = self.value(a).to_vec();
        let bv = self.value(b);
        for ni in 0..sa[0] {
            for i in 0..dp {
                out[ni * d + i] += bv[ni * dp + i];
            }
        }
        let ng = self.needs(&[a, b]);
        self.push(sa, out, Op::PrefixAdd { a, b }, ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let ng = self.needs(&[x]);
        self.push(vec![1], vec![m], Op::Mean(x), ng)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> NodeId {
        let mut total = T::zero();
        for &(id, w) in terms {
            assert_eq!(self.value(id).len(), 1, "weighted_sum: scalar terms only");
            total += w * self.value(id)[0];
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let ng = self.needs(&ids);
        self.push(vec![1], vec![total], Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Records a custom op whose forward value the caller already computed.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        shape: Vec<usize>,
        value: Vec<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> NodeId {
        let ng = self.needs(inputs);
        self.push(shape, value, Op::Custom { inputs: inputs.to_vec(), op }, ng)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward: root must be scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let Some(gout) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.propagate(id, &gout, &mut grads);
            }
            grads[id] = Some(gout);
        }
        let param_of_node = self.param_nodes.iter().map(|(&p, &n)| (p, n)).collect();
        Gradients { node_grads: grads, param_of_node }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: NodeId, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, k } => {
                let (x, w, b, k) = (*x, *w, *b, *k);
                let xs = self.shape(x);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let co = self.shape(w)[0];
                let hw = h * wd;
                let ck = c * k * k;
                let xv = self.value(x);
                let wv = self.value(w);
                let mut dw = vec![T::zero(); co * ck];
                let mut db = vec![T::zero(); co];
                let need_x = self.nodes[x].needs_grad;
                let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut cols = vec![T::zero(); if k == 1 { 0 } else { ck * hw }];
                let mut dcols = vec![T::zero(); if need_x && k != 1 { ck * hw } else { 0 }];
                for ni in 0..n {
                    let go = &gout[ni * co * hw..(ni + 1) * co * hw];
                    let xi = &xv[ni * c * hw..(ni + 1) * c * hw];
                    for o in 0..co {
                        db[o] += go[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
                    }
                    if k == 1 {
                        matmul(co, hw, ck, go, false, xi, true, &mut dw, true);
                        if need_x {
                            let dxi = &mut dx[ni * c * hw..(ni + 1) * c * hw];
                            matmul(ck, co, hw, wv, true, go, false, dxi, true);
                        }
                    } else {
                        im2col(xi, c, h, wd, k, &mut cols);
                        matmul(co, hw, ck, go, false, &cols, true, &mut dw, true);
                        if need_x {
                            matmul(ck, co, hw, wv, true, go, false, &mut dcols, false);
                            col2im(&dcols, c, h, wd, k, &mut dx[ni * c * hw..(ni + 1) * c * hw]);
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, x, dx);
                }
                self.accumulate(grads, w, dw);
                self.accumulate(grads, b, db);
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let n = self.shape(x)[0];
                let ws = self.shape(w);
                let (fo, fin) = (ws[0], ws[1]);
                if self.nodes[x].needs_grad {
                    let mut dx = vec![T::zero(); n * fin];
                    matmul(n, fo, fin, gout, false, self.value(w), false, &mut dx, false);
                    self.accumulate(grads, x, dx);
                }
                let mut dw = vec![T::zero(); fo * fin];
                matmul(fo, n, fin, gout, true, self.value(x), false, &mut dw, false);
                self.accumulate(grads, w, dw);
                let mut db = vec![T::zero(); fo];
                for ni in 0..n {
                    for o in 0..fo {
                        db[o] += gout[ni * fo + o];
                    }
                }
                self.accumulate(grads, b, db);
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let xs = self.shape(x);
                let (n, c) = (xs[0], xs[1]);
                let hw: usize = xs[2..].iter().product();
                let cg = c / groups;
                let m = T::of((cg * hw) as f64);
                let xv = self.value(x);
                let gv = self.value(gamma);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for g in 0..groups {
                        let (mean, rstd) = stats[ni * groups + g];
                        let start = (ni * c + g * cg) * hw;
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for cc in 0..cg {
                            let ch = g * cg + cc;
                            let off = start + cc * hw;
                            for i in 0..hw {
                                let xh = (xv[off + i] - mean) * rstd;
                                let go = gout[off + i];
                                dg[ch] += go * xh;
                                dbeta[ch] += go;
                                let dxh = go * gv[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        let mean_dxh = sum_dxh / m;
                        let mean_dxh_xh = sum_dxh_xh / m;
                        for cc in 0..cg {
                            let ch = g * cg + cc;
                            let off = start + cc * hw;
                            for i in 0..hw {
                                let xh = (xv[off + i] - mean) * rstd;
                                let dxh = gout[off + i] * gv[ch];
                                dx[off + i] = rstd * (dxh - mean_dxh - xh * mean_dxh_xh);
                            }
                        }
                    }
                }
                self.accumulate(grads, x, dx);
                self.accumulate(grads, gamma, dg);
                self.accumulate(grads, beta, dbeta);
            }
            Op::Silu(x) => {
                let dx = self.value(*x).iter().zip(gout).map(|(&v, &g)| g * silu_grad(v)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.to_vec());
                self.accumulate(grads, *b, gout.to_vec());
            }
            Op::Concat(ids) => {
                let n = node.shape[0];
                let mut parts: Vec<Vec<T>> = ids.iter().map(|&i| Vec::with_capacity(self.value(i).len())).collect();
                let mut off = 0;
                for _ in 0..n {
                    for (j, &i) in ids.iter().enumerate() {
                        let per = self.value(i).len() / n;
                        parts[j].extend_from_slice(&gout[off..off + per]);
                        off += per;
                    }
                }
                for (&i, g) in ids.iter().zip(parts) {
                    self.accumulate(grads, i, g);
                }
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / 2, w / 2);
                let q = T::of(0.25);
                let mut dx = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..h {
                        for xo in 0..w {
                            dx[p * h * w + y * w + xo] = gout[p * ho * wo + (y / 2) * wo + xo / 2] * q;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x);
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let wo = 2 * w;
                let mut dx = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..2 * h {
                        for xo in 0..wo {
                            dx[p * h * w + (y / 2) * w + xo / 2] += gout[p * 4 * h * w + y * wo + xo];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Modulate { x, ss } => {
                let (x, ss) = (*x, *ss);
                let xs = self.shape(x);
                let (n, c) = (xs[0], xs[1]);
                let hw: usize = xs[2..].iter().product();
                let xv = self.value(x);
                let sv = self.value(ss);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dss = vec![T::zero(); n * 2 * c];
                for ni in 0..n {
                    for ch in 0..c {
                        let s = T::one() + sv[ni * 2 * c + ch];
                        let off = (ni * c + ch) * hw;
                        let mut ds = T::zero();
                        let mut dt = T::zero();
                        for i in 0..hw {
                            let g = gout[off + i];
                            dx[off + i] = g * s;
                            ds += g * xv[off + i];
                            dt += g;
                        }
                        dss[ni * 2 * c + ch] = ds;
                        dss[ni * 2 * c + c + ch] = dt;
                    }
                }
                self.accumulate(grads, x, dx);
                self.accumulate(grads, ss, dss);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw: usize = xs[2..].iter().product();
                let inv = T::one() / T::of(hw as f64);
                let dx = (0..self.value(*x).len()).map(|i| gout[i / hw] * inv).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::PrefixAdd { a, b } => {
                let (a, b) = (*a, *b);
                let sb = self.shape(b);
                let (n, dp) = (sb[0], sb[1]);
                let d = node.shape[1];
                let mut db = vec![T::zero(); n * dp];
                for ni in 0..n {
                    db[ni * dp..(ni + 1) * dp].copy_from_slice(&gout[ni * d..ni * d + dp]);
                }
                self.accumulate(grads, a, gout.to_vec());
                self.accumulate(grads, b, db);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let g = gout[0] / T::of(len as f64);
                self.accumulate(grads, *x, vec![g; len]);
            }
            Op::WeightedSum(terms) => {
                for &(i, w) in terms {
                    self.accumulate(grads, i, vec![w * gout[0]]);
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&[T]> = inputs.iter().map(|&i| self.value(i)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&i| self.nodes[i].needs_grad).collect();
                let gs = op.backward(&vals, &node.value, gout, &needs);
                assert_eq!(gs.len(), inputs.len(), "{}: one gradient slot per input", op.name());
                for (&i, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        self.accumulate(grads, i, g);
                    }
                }
            }
        }
    }
}
