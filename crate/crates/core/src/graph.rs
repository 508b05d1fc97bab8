//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! output value. [`Graph::backward`] replays the tape in reverse and returns
//! gradients for every leaf (inputs created with [`Graph::input_with_grad`]
//! and parameters pulled from a [`ParamStore`]). A parameter used several
//! times, as in the Siamese branches, maps to a single leaf so its gradient
//! is the sum over all uses.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, F),
    Gate { x: Var, gate: Var },
    ChannelDot { v: Var, q: Var },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    UpsampleNearest2(Var),
    UpsampleBilinear2(Var),
    ConcatChannels(Vec<Var>),
    ConcatBatch(Vec<Var>),
    SliceBatch { x: Var, start: usize },
    Mean(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, to be folded
/// into the running buffers after the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormUpdate<F> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<F>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<F>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<ParamId, Var>,
    bn_updates: Vec<BatchNormUpdate<F>>,
    scratch: Vec<F>,
}

/// Gradients of leaves after [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// `(id, gradient)` for every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}

fn check_rank(op: &'static str, t: &Tensor<impl Scalar>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::InvalidInput(alloc::format!(
            "{op} expects a rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            bn_updates: Vec::new(),
            scratch: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input, no gradient is tracked.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn input_with_grad(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn push_bn_update(&mut self, update: BatchNormUpdate<F>) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BatchNormUpdate<F>> {
        core::mem::take(&mut self.bn_updates)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        check_rank("conv2d", xv, 4)?;
        check_rank("conv2d weight", wv, 4)?;
        let (n, c, h, wd) = xv.dims4();
        let (o, wc, kh, kw) = wv.dims4();
        if wc != c || kh != kw {
            return Err(shape_mismatch("conv2d", xv.shape(), wv.shape()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(shape_mismatch("conv2d bias", self.value(b).shape(), &[o]));
            }
        }
        let g = ConvGeom::new(c, h, wd, kh, stride, pad)
            .ok_or_else(|| shape_mismatch("conv2d kernel", xv.shape(), wv.shape()))?;
        let mut y = Tensor::zeros(&[n, o, g.oh, g.ow]);
        let mut scratch = core::mem::take(&mut self.scratch);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = b.map(|b| self.value(b).data());
            for i in 0..n {
                kernels::conv_forward_item(
                    xv.item(i),
                    wv.data(),
                    bv,
                    o,
                    &g,
                    &mut scratch,
                    y.item_mut(i),
                );
            }
        }
        self.scratch = scratch;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Transposed convolution, weight `[in, out, k, k]`; output side is
    /// `(h - 1) * stride - 2 * pad + k`.
    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        check_rank("deconv2d", xv, 4)?;
        check_rank("deconv2d weight", wv, 4)?;
        let (n, c, h, wd) = xv.dims4();
        let (wi, o, kh, kw) = wv.dims4();
        if wi != c || kh != kw || stride == 0 || (h - 1) * stride + kh < 2 * pad {
            return Err(shape_mismatch("deconv2d", xv.shape(), wv.shape()));
        }
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (wd - 1) * stride + kw - 2 * pad;
        let g = ConvGeom::new(o, oh, ow, kh, stride, pad)
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or_else(|| shape_mismatch("deconv2d geometry", xv.shape(), wv.shape()))?;
        let mut y = Tensor::zeros(&[n, o, oh, ow]);
        let mut scratch = core::mem::take(&mut self.scratch);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for i in 0..n {
                kernels::deconv_forward_item(xv.item(i), wv.data(), c, &g, &mut scratch, y.item_mut(i));
            }
            if let Some(b) = b {
                let bv = self.value(b);
                if bv.shape() != [o] {
                    return Err(shape_mismatch("deconv2d bias", bv.shape(), &[o]));
                }
                let plane = oh * ow;
                for i in 0..n {
                    let item = y.item_mut(i);
                    for (ch, &bo) in bv.data().iter().enumerate() {
                        item[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v += bo);
                    }
                }
            }
        }
        self.scratch = scratch;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            y,
            Op::Deconv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Batch norm over `(n, h, w)` per channel using the batch statistics.
    /// Returns the output and the `(mean, unbiased variance)` of the batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> Result<(Var, Vec<F>, Vec<F>)> {
        let xv = self.value(x);
        check_rank("batch_norm", xv, 4)?;
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let count = n * plane;
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ch in 0..c {
            let mut s = F::zero();
            for i in 0..n {
                s += xv.item(i)[ch * plane..(ch + 1) * plane].iter().copied().sum::<F>();
            }
            let m = s / F::of(count as f64);
            let mut ss = F::zero();
            for i in 0..n {
                for &v in &xv.item(i)[ch * plane..(ch + 1) * plane] {
                    ss += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = ss / F::of(count as f64);
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let y = self.bn_apply(x, gamma, beta, &mean, &inv_std)?;
        let unbiased = if count > 1 {
            let k = F::of(count as f64 / (count - 1) as f64);
            var.iter().map(|&v| v * k).collect()
        } else {
            var
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((out, mean, unbiased))
    }

    /// Batch norm with frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Result<Var> {
        check_rank("batch_norm", self.value(x), 4)?;
        let inv_std: Vec<F> = running_var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let y = self.bn_apply(x, gamma, beta, running_mean, &inv_std)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[F], inv_std: &[F]) -> Result<Tensor<F>> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        if gv.len() != c || bv.len() != c || mean.len() != c || inv_std.len() != c {
            return Err(shape_mismatch("batch_norm", xv.shape(), &[gv.len()]));
        }
        let plane = h * w;
        let mut y = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n {
            let src = xv.item(i);
            let dst = y.item_mut(i);
            for ch in 0..c {
                let scale = gv[ch] * inv_std[ch];
                let shift = bv[ch] - mean[ch] * scale;
                for (d, &s) in dst[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .zip(&src[ch * plane..(ch + 1) * plane])
                {
                    *d = s * scale + shift;
                }
            }
        }
        Ok(y)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| F::one() / (F::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.abs());
        let rg = self.rg(x);
        self.push(y, Op::Abs(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    /// `|a - b|` elementwise.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.abs(d))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let y = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, s), rg)
    }

    /// `x[n, c, h, w] * gate[n, 0, h, w]`.
    pub fn gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gate);
        check_rank("gate", xv, 4)?;
        let (n, c, h, w) = xv.dims4();
        if gv.shape() != [n, 1, h, w] {
            return Err(shape_mismatch("gate", xv.shape(), gv.shape()));
        }
        let plane = h * w;
        let mut y = xv.clone();
        for i in 0..n {
            let g = gv.item(i);
            let dst = y.item_mut(i);
            for ch in 0..c {
                for (d, &gg) in dst[ch * plane..(ch + 1) * plane].iter_mut().zip(g) {
                    *d *= gg;
                }
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(y, Op::Gate { x, gate }, rg))
    }

    /// Per-site inner product `y[n, 0, h, w] = sum_c v[n, c] * q[n, c, h, w]`.
    pub fn channel_dot(&mut self, v: Var, q: Var) -> Result<Var> {
        let vv = self.value(v);
        let qv = self.value(q);
        check_rank("channel_dot", qv, 4)?;
        let (n, c, h, w) = qv.dims4();
        if vv.shape() != [n, c] {
            return Err(shape_mismatch("channel_dot", vv.shape(), qv.shape()));
        }
        let plane = h * w;
        let mut y = Tensor::zeros(&[n, 1, h, w]);
        for i in 0..n {
            let vec = &vv.data()[i * c..(i + 1) * c];
            let src = qv.item(i);
            let dst = y.item_mut(i);
            for (ch, &s) in vec.iter().enumerate() {
                for (d, &x) in dst.iter_mut().zip(&src[ch * plane..(ch + 1) * plane]) {
                    *d += s * x;
                }
            }
        }
        let rg = self.rg(v) || self.rg(q);
        Ok(self.push(y, Op::ChannelDot { v, q }, rg))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_rank("global_avg_pool", xv, 4)?;
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let inv = F::one() / F::of(plane as f64);
        let mut y = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let src = xv.item(i);
            for ch in 0..c {
                y.data_mut()[i * c + ch] =
                    src[ch * plane..(ch + 1) * plane].iter().copied().sum::<F>() * inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::GlobalAvgPool(x), rg))
    }

    /// `y = x w^T + b` with `x: [n, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        check_rank("linear", xv, 2)?;
        check_rank("linear weight", wv, 2)?;
        let (n, k) = (xv.shape()[0], xv.shape()[1]);
        let (o, wk) = (wv.shape()[0], wv.shape()[1]);
        if wk != k {
            return Err(shape_mismatch("linear", xv.shape(), wv.shape()));
        }
        let mut y = Tensor::zeros(&[n, o]);
        F::gemm(
            n,
            k,
            o,
            F::one(),
            xv.data(),
            (k as isize, 1),
            wv.data(),
            (1, k as isize),
            F::zero(),
            y.data_mut(),
            (o as isize, 1),
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(shape_mismatch("linear bias", bv.shape(), &[o]));
            }
            for row in y.data_mut().chunks_mut(o) {
                for (d, &bb) in row.iter_mut().zip(bv.data()) {
                    *d += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_rank("upsample_nearest2", xv, 4)?;
        let (n, c, h, w) = xv.dims4();
        let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for i in 0..n {
            let src = xv.item(i);
            let dst = y.item_mut(i);
            for ch in 0..c {
                for oy in 0..2 * h {
                    let srow = &src[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
                    let drow = &mut dst[(ch * 2 * h + oy) * 2 * w..(ch * 2 * h + oy + 1) * 2 * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        *d = srow[ox / 2];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::UpsampleNearest2(x), rg))
    }

    /// ×2 bilinear upsampling with half-pixel centres.
    pub fn upsample_bilinear2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_rank("upsample_bilinear2", xv, 4)?;
        let (n, c, h, w) = xv.dims4();
        let ty = kernels::bilinear_taps::<F>(h);
        let tx = kernels::bilinear_taps::<F>(w);
        let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let (ip, op) = (h * w, 4 * h * w);
        for i in 0..n {
            let src = xv.item(i);
            let dst = y.item_mut(i);
            for ch in 0..c {
                kernels::bilinear_up2_plane(
                    &src[ch * ip..(ch + 1) * ip],
                    w,
                    &ty,
                    &tx,
                    &mut dst[ch * op..(ch + 1) * op],
                );
            }
        }
        let rg = self.rg(x);
        Ok(self.push(y, Op::UpsampleBilinear2(x), rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| {
            Error::InvalidInput("concat of zero tensors".into())
        })?);
        check_rank("concat_channels", first, 4)?;
        let (n, _, h, w) = first.dims4();
        let mut total_c = 0;
        for &x in xs {
            let v = self.value(x);
            check_rank("concat_channels", v, 4)?;
            let (vn, vc, vh, vw) = v.dims4();
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_mismatch("concat_channels", first.shape(), v.shape()));
            }
            total_c += vc;
        }
        let mut y = Tensor::zeros(&[n, total_c, h, w]);
        for i in 0..n {
            let mut off = 0;
            for &x in xs {
                let src = self.value(x).item(i);
                y.item_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(y, Op::ConcatChannels(xs.to_vec()), rg))
    }

    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| {
            Error::InvalidInput("concat of zero tensors".into())
        })?);
        let tail = first.shape()[1..].to_vec();
        let mut n = 0;
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            if v.shape()[1..] != tail[..] {
                return Err(shape_mismatch("concat_batch", &tail, &v.shape()[1..]));
            }
            n += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&tail);
        let y = Tensor::from_vec(&shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(y, Op::ConcatBatch(xs.to_vec()), rg))
    }

    /// Batch items `[start, end)`.
    pub fn slice_batch(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.shape()[0] {
            return Err(Error::InvalidInput(alloc::format!(
                "batch slice {start}..{end} out of range for shape {:?}",
                xv.shape()
            )));
        }
        let y = xv.batch_slice(start, end);
        let rg = self.rg(x);
        Ok(self.push(y, Op::SliceBatch { x, start }, rg))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidInput("mean of zero tensors".into()))?;
        let mut acc = self.value(first).clone();
        for &x in &xs[1..] {
            let v = self.value(x);
            if v.shape() != acc.shape() {
                return Err(shape_mismatch("mean", acc.shape(), v.shape()));
            }
            acc.add_assign(v);
        }
        let inv = F::one() / F::of(xs.len() as f64);
        acc.data_mut().iter_mut().for_each(|v| *v *= inv);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(acc, Op::Mean(xs.to_vec()), rg))
    }

    /// Reverse pass from `root` seeded with `d(objective)/d(root)`.
    pub fn backward(&mut self, root: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        if seed.shape() != self.value(root).shape() {
            return Err(shape_mismatch("backward seed", seed.shape(), self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        let mut scratch = core::mem::take(&mut self.scratch);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(gy);
                }
                op => self.backward_op(op, &self.nodes[idx].value, gy, &mut grads, &mut scratch),
            }
        }
        self.scratch = scratch;
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(&p, &v)| (p, v)).collect(),
        })
    }

    fn backward_op(
        &self,
        op: &Op<F>,
        y: &Tensor<F>,
        gy: Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        scratch: &mut Vec<F>,
    ) {
        match op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = xv.dims4();
                let (o, _, k, _) = wv.dims4();
                let g = ConvGeom::new(c, h, wd, k, *stride, *pad).expect("validated in forward");
                let mut dw = self.rg(*w).then(|| Tensor::zeros(wv.shape()));
                let mut dx = self.rg(*x).then(|| Tensor::zeros(xv.shape()));
                for i in 0..n {
                    kernels::conv_backward_item(
                        xv.item(i),
                        wv.data(),
                        gy.item(i),
                        o,
                        &g,
                        scratch,
                        dw.as_mut().map(|t| t.data_mut()),
                        dx.as_mut().map(|t| t.item_mut(i)),
                    );
                }
                if let Some(b) = b {
                    accumulate(grads, *b, channel_sums(&gy));
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
            }
            Op::Deconv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = xv.dims4();
                let (_, o, k, _) = wv.dims4();
                let (_, _, oh, ow) = y.dims4();
                let g = ConvGeom::new(o, oh, ow, k, *stride, *pad).expect("validated in forward");
                debug_assert_eq!((g.oh, g.ow), (h, wd));
                let mut dw = self.rg(*w).then(|| Tensor::zeros(wv.shape()));
                let mut dx = self.rg(*x).then(|| Tensor::zeros(xv.shape()));
                for i in 0..n {
                    kernels::deconv_backward_item(
                        xv.item(i),
                        wv.data(),
                        gy.item(i),
                        c,
                        &g,
                        scratch,
                        dw.as_mut().map(|t| t.data_mut()),
                        dx.as_mut().map(|t| t.item_mut(i)),
                    );
                }
                if let Some(b) = b {
                    accumulate(grads, *b, channel_sums(&gy));
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma).data();
                let (n, c, h, w) = xv.dims4();
                let plane = h * w;
                let count = F::of((n * plane) as f64);
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for i in 0..n {
                    let xs = xv.item(i);
                    let gs = gy.item(i);
                    for ch in 0..c {
                        let r = ch * plane..(ch + 1) * plane;
                        for (&xx, &gg) in xs[r.clone()].iter().zip(&gs[r]) {
                            dbeta[ch] += gg;
                            dgamma[ch] += gg * (xx - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    for i in 0..n {
                        let xs = xv.item(i);
                        let gs = gy.item(i);
                        let ds = dx.item_mut(i);
                        for ch in 0..c {
                            let r = ch * plane..(ch + 1) * plane;
                            let k = gv[ch] * inv_std[ch];
                            if *batch_stats {
                                let mdb = dbeta[ch] / count;
                                let mdg = dgamma[ch] / count;
                                for ((d, &xx), &gg) in
                                    ds[r.clone()].iter_mut().zip(&xs[r.clone()]).zip(&gs[r])
                                {
                                    let xhat = (xx - mean[ch]) * inv_std[ch];
                                    *d = k * (gg - mdb - xhat * mdg);
                                }
                            } else {
                                for (d, &gg) in ds[r.clone()].iter_mut().zip(&gs[r]) {
                                    *d = k * gg;
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma).expect("len c"));
                accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta).expect("len c"));
            }
            Op::Relu(x) => {
                let dx = y
                    .zip_map(&gy, |yy, g| if yy > F::zero() { g } else { F::zero() })
                    .expect("same shape");
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = y
                    .zip_map(&gy, |s, g| g * s * (F::one() - s))
                    .expect("same shape");
                accumulate(grads, *x, dx);
            }
            Op::Abs(x) => {
                let dx = self
                    .value(*x)
                    .zip_map(&gy, |v, g| {
                        if v > F::zero() {
                            g
                        } else if v < F::zero() {
                            -g
                        } else {
                            F::zero()
                        }
                    })
                    .expect("same shape");
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gy);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gy.map(|v| -v));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, gy.map(|v| v * s));
            }
            Op::Gate { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let (n, c, h, w) = xv.dims4();
                let plane = h * w;
                if self.rg(*x) {
                    let mut dx = gy.clone();
                    for i in 0..n {
                        let g = gv.item(i);
                        let d = dx.item_mut(i);
                        for ch in 0..c {
                            for (dd, &gg) in d[ch * plane..(ch + 1) * plane].iter_mut().zip(g) {
                                *dd *= gg;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.rg(*gate) {
                    let mut dg = Tensor::zeros(gv.shape());
                    for i in 0..n {
                        let xs = xv.item(i);
                        let gs = gy.item(i);
                        let d = dg.item_mut(i);
                        for ch in 0..c {
                            let r = ch * plane..(ch + 1) * plane;
                            for ((dd, &xx), &gg) in d.iter_mut().zip(&xs[r.clone()]).zip(&gs[r]) {
                                *dd += xx * gg;
                            }
                        }
                    }
                    accumulate(grads, *gate, dg);
                }
            }
            Op::ChannelDot { v, q } => {
                let vv = self.value(*v);
                let qv = self.value(*q);
                let (n, c, h, w) = qv.dims4();
                let plane = h * w;
                if self.rg(*v) {
                    let mut dv = Tensor::zeros(vv.shape());
                    for i in 0..n {
                        let qs = qv.item(i);
                        let gs = gy.item(i);
                        for ch in 0..c {
                            dv.data_mut()[i * c + ch] = qs[ch * plane..(ch + 1) * plane]
                                .iter()
                                .zip(gs)
                                .map(|(&a, &b)| a * b)
                                .sum();
                        }
                    }
                    accumulate(grads, *v, dv);
                }
                if self.rg(*q) {
                    let mut dq = Tensor::zeros(qv.shape());
                    for i in 0..n {
                        let gs = gy.item(i);
                        let d = dq.item_mut(i);
                        for ch in 0..c {
                            let s = vv.data()[i * c + ch];
                            for (dd, &gg) in d[ch * plane..(ch + 1) * plane].iter_mut().zip(gs) {
                                *dd = s * gg;
                            }
                        }
                    }
                    accumulate(grads, *q, dq);
                }
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let plane = h * w;
                let inv = F::one() / F::of(plane as f64);
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..n {
                    let d = dx.item_mut(i);
                    for ch in 0..c {
                        let g = gy.data()[i * c + ch] * inv;
                        d[ch * plane..(ch + 1) * plane].fill(g);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, k) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[0];
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    F::gemm(
                        n,
                        o,
                        k,
                        F::one(),
                        gy.data(),
                        (o as isize, 1),
                        wv.data(),
                        (k as isize, 1),
                        F::zero(),
                        dx.data_mut(),
                        (k as isize, 1),
                    );
                    accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    F::gemm(
                        o,
                        n,
                        k,
                        F::one(),
                        gy.data(),
                        (1, o as isize),
                        xv.data(),
                        (k as isize, 1),
                        F::zero(),
                        dw.data_mut(),
                        (k as isize, 1),
                    );
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = Tensor::zeros(&[o]);
                    for row in gy.data().chunks(o) {
                        for (d, &g) in db.data_mut().iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::UpsampleNearest2(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..n {
                    let gs = gy.item(i);
                    let d = dx.item_mut(i);
                    for ch in 0..c {
                        for oy in 0..2 * h {
                            let grow = &gs[(ch * 2 * h + oy) * 2 * w..(ch * 2 * h + oy + 1) * 2 * w];
                            let drow = &mut d[(ch * h + oy / 2) * w..(ch * h + oy / 2 + 1) * w];
                            for (ox, &g) in grow.iter().enumerate() {
                                drow[ox / 2] += g;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::UpsampleBilinear2(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let ty = kernels::bilinear_taps::<F>(h);
                let tx = kernels::bilinear_taps::<F>(w);
                let (ip, op) = (h * w, 4 * h * w);
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..n {
                    let gs = gy.item(i);
                    let d = dx.item_mut(i);
                    for ch in 0..c {
                        kernels::bilinear_up2_plane_backward(
                            &gs[ch * op..(ch + 1) * op],
                            w,
                            &ty,
                            &tx,
                            &mut d[ch * ip..(ch + 1) * ip],
                        );
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatChannels(xs) => {
                let n = gy.shape()[0];
                let mut off = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let per = xv.numel() / n;
                    if self.rg(x) {
                        let mut dx = Tensor::zeros(xv.shape());
                        for i in 0..n {
                            dx.item_mut(i).copy_from_slice(&gy.item(i)[off..off + per]);
                        }
                        accumulate(grads, x, dx);
                    }
                    off += per;
                }
            }
            Op::ConcatBatch(xs) => {
                let mut start = 0;
                for &x in xs {
                    let len = self.value(x).shape()[0];
                    if self.rg(x) {
                        accumulate(grads, x, gy.batch_slice(start, start + len));
                    }
                    start += len;
                }
            }
            Op::SliceBatch { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let per = xv.numel() / xv.shape()[0];
                dx.data_mut()[start * per..start * per + gy.numel()].copy_from_slice(gy.data());
                accumulate(grads, *x, dx);
            }
            Op::Mean(xs) => {
                let inv = F::one() / F::of(xs.len() as f64);
                let g = gy.map(|v| v * inv);
                for &x in xs {
                    if self.rg(x) {
                        accumulate(grads, x, g.clone());
                    }
                }
            }
        }
    }
}

fn channel_sums<F: Scalar>(gy: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = gy.dims4();
    let plane = h * w;
    let mut s = vec![F::zero(); c];
    for i in 0..n {
        let g = gy.item(i);
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc += g[ch * plane..(ch + 1) * plane].iter().copied().sum::<F>();
        }
    }
    Tensor::from_vec(&[c], s).expect("len c")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 10_000) as f64 / 5_000.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Checks d(sum(probe * f(x)))/dx against central differences.
    fn check_input_grad(
        shape: &[usize],
        seed: u64,
        build: impl Fn(&mut Graph<f64>, Var) -> Var,
    ) {
        let x0 = rand_tensor(shape, seed);
        let mut g = Graph::new();
        let x = g.input_with_grad(x0.clone());
        let y = build(&mut g, x);
        let probe = rand_tensor(g.value(y).shape(), seed + 1);
        let grads = g.backward(y, probe.clone()).unwrap();
        let analytic = grads.wrt(x).unwrap().clone();
        let objective = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.input(t);
            let y = build(&mut g, x);
            g.value(y)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..x0.numel() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let fd = (objective(plus) - objective(minus)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                "element {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn conv_input_gradient() {
        let w = rand_tensor(&[3, 2, 3, 3], 7);
        check_input_grad(&[2, 2, 5, 6], 1, |g, x| {
            let w = g.input(w.clone());
            g.conv2d(x, w, None, 2, 1).unwrap()
        });
    }

    #[test]
    fn deconv_input_gradient_and_shape() {
        let w = rand_tensor(&[2, 3, 4, 4], 8);
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&[1, 2, 3, 5], 2));
        let wv = g.input(w.clone());
        let y = g.deconv2d(x, wv, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 6, 10]);
        check_input_grad(&[1, 2, 3, 5], 3, |g, x| {
            let w = g.input(w.clone());
            g.deconv2d(x, w, None, 2, 1).unwrap()
        });
    }

    #[test]
    fn batch_norm_train_input_gradient() {
        let gamma = rand_tensor(&[3], 9);
        let beta = rand_tensor(&[3], 10);
        check_input_grad(&[2, 3, 3, 2], 4, |g, x| {
            let ga = g.input(gamma.clone());
            let be = g.input(beta.clone());
            g.batch_norm_train(x, ga, be, 1e-5).unwrap().0
        });
    }

    #[test]
    fn bilinear_and_nearest_input_gradients() {
        check_input_grad(&[1, 2, 3, 4], 5, |g, x| g.upsample_bilinear2(x).unwrap());
        check_input_grad(&[2, 1, 2, 3], 6, |g, x| g.upsample_nearest2(x).unwrap());
    }

    #[test]
    fn pooling_linear_and_dot_gradients() {
        let w = rand_tensor(&[4, 3], 11);
        check_input_grad(&[2, 3, 2, 2], 12, |g, x| {
            let w = g.input(w.clone());
            let p = g.global_avg_pool(x).unwrap();
            g.linear(p, w, None).unwrap()
        });
        let q = rand_tensor(&[2, 3, 2, 3], 13);
        check_input_grad(&[2, 3], 14, |g, v| {
            let q = g.input(q.clone());
            g.channel_dot(v, q).unwrap()
        });
    }

    #[test]
    fn shared_parameter_gradient_sums_over_uses() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", crate::params::ParamKind::Trainable, Tensor::scalar(3.0).reshape(&[1, 1]).unwrap());
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(&[1, 1], alloc::vec![2.0]).unwrap());
        let b = g.input(Tensor::from_vec(&[1, 1], alloc::vec![5.0]).unwrap());
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w1, w2);
        let ya = g.linear(a, w1, None).unwrap();
        let yb = g.linear(b, w2, None).unwrap();
        let s = g.add(ya, yb).unwrap();
        let grads = g.backward(s, Tensor::from_vec(&[1, 1], alloc::vec![1.0]).unwrap()).unwrap();
        assert_eq!(grads.param(id).unwrap().data(), &[7.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.input(Tensor::zeros(&[1, 2, 4, 2]));
        assert!(matches!(g.sub(a, b), Err(Error::ShapeMismatch { .. })));
        let v = g.input(Tensor::zeros(&[1, 3]));
        assert!(g.channel_dot(v, a).is_err());
    }
}
