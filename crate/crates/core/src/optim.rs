//! Adam with coupled L2 weight decay and a step learning-rate schedule.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{shape_mismatch, Error, Result};
use crate::graph::Gradients;
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "adam eps must be > 0 and weight decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `base * gamma^(step / step_size)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLr {
    pub base: f64,
    pub step_size: u64,
    pub gamma: f64,
}

impl StepLr {
    pub fn at(&self, step: u64) -> f64 {
        let k = step / self.step_size.max(1);
        self.base * self.gamma.powi(k.min(i32::MAX as u64) as i32)
    }
}

/// First and second moments for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    cfg: AdamConfig,
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
    steps: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = |e: &crate::params::ParamEntry<F>| {
            (e.kind == ParamKind::Trainable).then(|| Tensor::zeros(e.value.shape()))
        };
        Self {
            cfg,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> impl Iterator<Item = (usize, &Tensor<F>, &Tensor<F>)> {
        self.m
            .iter()
            .zip(&self.v)
            .enumerate()
            .filter_map(|(i, (m, v))| Some((i, m.as_ref()?, v.as_ref()?)))
    }

    /// Restores state saved with [`Adam::moments`] and [`Adam::steps`].
    pub fn restore(&mut self, steps: u64, moments: Vec<(usize, Tensor<F>, Tensor<F>)>) -> Result<()> {
        for (i, m, v) in moments {
            let slot = self
                .m
                .get(i)
                .and_then(|s| s.as_ref())
                .ok_or_else(|| Error::InvalidInput(alloc::format!("no trainable parameter {i}")))?;
            if slot.shape() != m.shape() || m.shape() != v.shape() {
                return Err(shape_mismatch("adam restore", slot.shape(), m.shape()));
            }
            self.m[i] = Some(m);
            self.v[i] = Some(v);
        }
        self.steps = steps;
        Ok(())
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// are left untouched (their moments still decay).
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1f, b2f) = (F::of(b1), F::of(b2));
        let (one_b1, one_b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let wd = F::of(self.cfg.weight_decay);
        let step_size = F::of(lr / bc1);
        let inv_bc2_sqrt = F::of(1.0 / bc2.sqrt());
        let eps = F::of(self.cfg.eps);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let i = id.index();
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let Some(g) = grads.param(id) else {
                continue;
            };
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(shape_mismatch("adam", g.shape(), p.shape()));
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv + wd * *pv;
                *mv = b1f * *mv + one_b1 * gv;
                *vv = b2f * *vv + one_b2 * gv * gv;
                let denom = vv.sqrt() * inv_bc2_sqrt + eps;
                *pv -= step_size * *mv / denom;
            }
        }
        Ok(())
    }
}
