//! Parameterised layers built on [`Graph`] ops.

use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::graph::{BatchNormUpdate, Graph, Var};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running buffers updated after the pass.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, F> {
    pub graph: &'a mut Graph<F>,
    pub store: &'a ParamStore<F>,
    pub mode: Mode,
}

impl<'a, F: Scalar> Ctx<'a, F> {
    pub fn new(graph: &'a mut Graph<F>, store: &'a ParamStore<F>, mode: Mode) -> Self {
        Self { graph, store, mode }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_fan_in_uniform(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Trainable,
                Tensor::zeros(&[out_ch]),
            )
        });
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution with weight `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // each output pixel of a stride-s deconv sees in_ch * (k/s)^2 taps
        let fan_in = in_ch * (kernel / stride.max(1)).pow(2).max(1);
        let weight = store.add_fan_in_uniform(
            format!("{name}.weight"),
            &[in_ch, out_ch, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Trainable,
                Tensor::zeros(&[out_ch]),
            )
        });
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph.deconv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, ch: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                ParamKind::Trainable,
                Tensor::full(&[ch], F::one()),
            ),
            beta: store.add(
                format!("{name}.beta"),
                ParamKind::Trainable,
                Tensor::zeros(&[ch]),
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(&[ch]),
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::full(&[ch], F::one()),
            ),
            eps: 1e-5,
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        match cx.mode {
            Mode::Train => {
                let (y, mean, var) = cx.graph.batch_norm_train(x, gamma, beta, F::of(self.eps))?;
                cx.graph.push_bn_update(BatchNormUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => cx.graph.batch_norm_eval(
                x,
                gamma,
                beta,
                cx.store.get(self.running_mean).data(),
                cx.store.get(self.running_var).data(),
                F::of(self.eps),
            ),
        }
    }
}

/// Folds training-mode batch statistics into the running buffers with
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_bn_updates<F: Scalar>(
    store: &mut ParamStore<F>,
    updates: &[BatchNormUpdate<F>],
    momentum: F,
) {
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
            for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (F::one() - momentum) * *r + momentum * b;
            }
        }
    }
}

/// Convolution, batch norm and optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_ch,
                out_ch,
                kernel,
                stride,
                kernel / 2,
                false,
                rng,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch),
            relu,
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(if self.relu { cx.graph.relu(y) } else { y })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_fan_in_uniform(format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng),
            bias: store.add(
                format!("{name}.bias"),
                ParamKind::Trainable,
                Tensor::zeros(&[out_dim]),
            ),
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.graph.linear(x, w, Some(b))
    }
}
