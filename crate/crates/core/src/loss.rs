//! Equilibrium-optimization (EO) loss.
//!
//! Per pixel the binary cross-entropy `L_i` is reweighted by a hardness term
//! `w_i = (1 - p_t)^gamma`. The batch normalizer `Z = sum(w L) / sum(L)`
//! keeps the total loss unchanged, and a decaying schedule `lambda(t)`
//! blends the plain and the hardness-weighted loss:
//!
//! ```text
//! m_i = [lambda (1 - w_i / Z) + w_i / Z] L_i
//! ```
//!
//! so `sum(m) == sum(L)` for every `lambda`. `Z` is a normalizer only and is
//! held constant when differentiating.
//!
//! All arithmetic runs in `f64` whatever the network precision.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{shape_mismatch, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Mean binary cross-entropy.
    Bce,
    /// Mean of `w_i L_i` without normalizer or schedule.
    Focal,
    /// Equilibrium-optimization loss.
    #[default]
    Eo,
}

/// Decay of `lambda(t)` from 1 at `t = 0` to 0 at `t = step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// `1 - t/step`
    Linear,
    /// `(1 - t/step)^decay`
    Exponential,
    /// `(1 + cos(pi t/step)) / 2`
    #[default]
    Cosine,
    /// `lambda = 0`: hardness-weighted loss from the first step.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EoLossConfig {
    /// Focusing factor, `>= 0`.
    pub gamma: f64,
    pub schedule: Schedule,
    /// Schedule horizon in optimizer steps.
    pub step: u64,
    /// Exponent of the exponential schedule.
    pub decay: f64,
    /// Guard inside the logarithms and the degenerate-batch test.
    pub eps: f64,
    /// Use `(1 - p)^gamma` regardless of the label instead of `(1 - p_t)^gamma`.
    pub literal_hardness: bool,
}

impl Default for EoLossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            schedule: Schedule::Cosine,
            step: 2000,
            decay: 2.0,
            eps: 1e-7,
            literal_hardness: false,
        }
    }
}

impl EoLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "loss.gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if self.step == 0 {
            return Err(Error::InvalidConfig("loss.step must be >= 1".into()));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!(
                "loss.decay must be > 0, got {}",
                self.decay
            )));
        }
        if !(self.eps > 0.0 && self.eps <= 1e-3) {
            return Err(Error::InvalidConfig(alloc::format!(
                "loss.eps must lie in (0, 1e-3], got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Global optimizer step the schedule is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Hash)]
pub struct ScheduleState {
    pub t: u64,
}

/// Per-pixel terms of one EO evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLossBatch {
    pub bce: Vec<f64>,
    pub weights: Vec<f64>,
    pub z: f64,
    pub lambda: f64,
    /// `m_i`, the reweighted per-pixel losses.
    pub weighted: Vec<f64>,
}

/// Scalar loss and its gradient with respect to the probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<F> {
    pub value: f64,
    pub grad: Vec<F>,
    pub pixels: Option<PixelLossBatch>,
}

fn check_pair<F: Scalar>(p: &[F], y: &[F]) -> Result<()> {
    if p.len() != y.len() {
        return Err(shape_mismatch("loss", &[p.len()], &[y.len()]));
    }
    if p.is_empty() {
        return Err(Error::InvalidInput("loss over zero pixels".into()));
    }
    Ok(())
}

#[inline]
fn bce_pixel(p: f64, y: f64, eps: f64) -> f64 {
    -(y * (p + eps).ln() + (1.0 - y) * (1.0 - p + eps).ln())
}

#[inline]
fn bce_pixel_grad(p: f64, y: f64, eps: f64) -> f64 {
    -y / (p + eps) + (1.0 - y) / (1.0 - p + eps)
}

/// `(base, d base / dp)` of the hardness term.
#[inline]
fn hardness_base(p: f64, y: f64, literal: bool) -> (f64, f64) {
    if literal || y >= 0.5 {
        (1.0 - p, -1.0)
    } else {
        (p, 1.0)
    }
}

#[inline]
fn hardness_pixel(p: f64, y: f64, gamma: f64, literal: bool) -> (f64, f64) {
    let (base, dbase) = hardness_base(p, y, literal);
    let base = base.clamp(0.0, 1.0);
    let w = base.powf(gamma);
    let dw = if gamma == 0.0 || base == 0.0 {
        0.0
    } else {
        gamma * base.powf(gamma - 1.0) * dbase
    };
    (w, dw)
}

/// Per-pixel `-[y ln(p + eps) + (1 - y) ln(1 - p + eps)]`.
pub fn bce_map<F: Scalar>(p: &[F], y: &[F], eps: f64) -> Result<Vec<f64>> {
    check_pair(p, y)?;
    Ok(p
        .iter()
        .zip(y)
        .map(|(&p, &y)| bce_pixel(p.as_f64(), y.as_f64(), eps))
        .collect())
}

/// Per-pixel `(1 - p_t)^gamma` with `p_t` the probability of the true class
/// (or `(1 - p)^gamma` when `literal`).
pub fn hardness_weights<F: Scalar>(p: &[F], y: &[F], gamma: f64, literal: bool) -> Result<Vec<f64>> {
    check_pair(p, y)?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig("gamma must be >= 0".into()));
    }
    Ok(p
        .iter()
        .zip(y)
        .map(|(&p, &y)| hardness_pixel(p.as_f64(), y.as_f64(), gamma, literal).0)
        .collect())
}

/// `Z = sum(w L) / sum(L)`, or 1 when `sum(L) < eps`.
pub fn normalizer(weights: &[f64], bce: &[f64], eps: f64) -> Result<f64> {
    if weights.len() != bce.len() {
        return Err(shape_mismatch("normalizer", &[weights.len()], &[bce.len()]));
    }
    let total: f64 = bce.iter().sum();
    if total < eps {
        return Ok(1.0);
    }
    let weighted: f64 = weights.iter().zip(bce).map(|(w, l)| w * l).sum();
    if weighted <= 0.0 {
        // every lossy pixel has zero hardness; no mass to redistribute
        return Ok(1.0);
    }
    Ok(weighted / total)
}

/// `lambda(t)`, clamped to 0 once `t >= step`.
pub fn lambda_schedule(state: ScheduleState, cfg: &EoLossConfig) -> f64 {
    if cfg.schedule == Schedule::None {
        return 0.0;
    }
    let step = cfg.step.max(1);
    if state.t >= step {
        return 0.0;
    }
    let frac = state.t as f64 / step as f64;
    let lambda = match cfg.schedule {
        Schedule::Linear => 1.0 - frac,
        Schedule::Exponential => (1.0 - frac).powf(cfg.decay),
        Schedule::Cosine => 0.5 * (1.0 + (frac * PI).cos()),
        Schedule::None => 0.0,
    };
    lambda.clamp(0.0, 1.0)
}

/// Weight applied to `L_i`: `1 - (1 - lambda)(1 - w/Z)`, the same quantity
/// as `lambda (1 - w/Z) + w/Z` but exactly 1 when `lambda = 1` or `w = Z`.
#[inline]
fn pixel_coefficient(lambda: f64, w_over_z: f64) -> f64 {
    1.0 - (1.0 - lambda) * (1.0 - w_over_z)
}

/// EO loss: scalar mean of `m_i` and the per-pixel terms.
pub fn eo_loss<F: Scalar>(
    p: &[F],
    y: &[F],
    state: ScheduleState,
    cfg: &EoLossConfig,
) -> Result<(f64, PixelLossBatch)> {
    cfg.validate()?;
    let bce = bce_map(p, y, cfg.eps)?;
    let weights = hardness_weights(p, y, cfg.gamma, cfg.literal_hardness)?;
    let z = normalizer(&weights, &bce, cfg.eps)?;
    let lambda = lambda_schedule(state, cfg);
    let weighted: Vec<f64> = bce
        .iter()
        .zip(&weights)
        .map(|(&l, &w)| pixel_coefficient(lambda, w / z) * l)
        .collect();
    let value = weighted.iter().sum::<f64>() * (1.0 / p.len() as f64);
    Ok((
        value,
        PixelLossBatch {
            bce,
            weights,
            z,
            lambda,
            weighted,
        },
    ))
}

/// EO loss with `lambda` and `Z` supplied by the caller. Used to check
/// gradients with `Z` held fixed.
pub fn eo_loss_fixed<F: Scalar>(p: &[F], y: &[F], lambda: f64, z: f64, cfg: &EoLossConfig) -> Result<f64> {
    check_pair(p, y)?;
    let sum: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let (p, y) = (p.as_f64(), y.as_f64());
            let (w, _) = hardness_pixel(p, y, cfg.gamma, cfg.literal_hardness);
            pixel_coefficient(lambda, w / z) * bce_pixel(p, y, cfg.eps)
        })
        .sum();
    Ok(sum * (1.0 / p.len() as f64))
}

/// Loss value and `d loss / d p` for the configured loss kind.
pub fn compute_loss<F: Scalar>(
    kind: LossKind,
    p: &[F],
    y: &[F],
    state: ScheduleState,
    cfg: &EoLossConfig,
) -> Result<LossOutput<F>> {
    cfg.validate()?;
    check_pair(p, y)?;
    let inv_n = 1.0 / p.len() as f64;
    match kind {
        LossKind::Bce => {
            let mut sum = 0.0;
            let grad = p
                .iter()
                .zip(y)
                .map(|(&p, &y)| {
                    let (p, y) = (p.as_f64(), y.as_f64());
                    sum += bce_pixel(p, y, cfg.eps);
                    F::of(pixel_grad(1.0, bce_pixel_grad(p, y, cfg.eps), 0.0, inv_n))
                })
                .collect();
            Ok(LossOutput {
                value: sum * inv_n,
                grad,
                pixels: None,
            })
        }
        LossKind::Focal => {
            let mut sum = 0.0;
            let grad = p
                .iter()
                .zip(y)
                .map(|(&p, &y)| {
                    let (p, y) = (p.as_f64(), y.as_f64());
                    let l = bce_pixel(p, y, cfg.eps);
                    let (w, dw) = hardness_pixel(p, y, cfg.gamma, cfg.literal_hardness);
                    sum += w * l;
                    F::of(pixel_grad(w, bce_pixel_grad(p, y, cfg.eps), dw * l, inv_n))
                })
                .collect();
            Ok(LossOutput {
                value: sum * inv_n,
                grad,
                pixels: None,
            })
        }
        LossKind::Eo => {
            let (value, pixels) = eo_loss(p, y, state, cfg)?;
            let (lambda, z) = (pixels.lambda, pixels.z);
            let grad = p
                .iter()
                .zip(y)
                .enumerate()
                .map(|(i, (&p, &y))| {
                    let (p, y) = (p.as_f64(), y.as_f64());
                    let (_, dw) = hardness_pixel(p, y, cfg.gamma, cfg.literal_hardness);
                    let coef = pixel_coefficient(lambda, pixels.weights[i] / z);
                    let extra = (1.0 - lambda) / z * dw * pixels.bce[i];
                    F::of(pixel_grad(coef, bce_pixel_grad(p, y, cfg.eps), extra, inv_n))
                })
                .collect();
            Ok(LossOutput {
                value,
                grad,
                pixels: Some(pixels),
            })
        }
    }
}

/// `(coef * dL/dp + extra) / n`, shared by every loss kind so identical
/// inputs give bit-identical gradients.
#[inline]
fn pixel_grad(coef: f64, dl: f64, extra: f64, inv_n: f64) -> f64 {
    (coef * dl + extra) * inv_n
}

/// Share of `sum(weighted)` carried by the `fraction` of pixels with the
/// largest hardness weight (ties broken by index).
pub fn hard_mass_share(weights: &[f64], weighted: &[f64], fraction: f64) -> f64 {
    let total: f64 = weighted.iter().sum();
    if weights.is_empty() || total <= 0.0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let k = ((weights.len() as f64 * fraction).ceil() as usize).clamp(1, weights.len());
    order[..k].iter().map(|&i| weighted[i]).sum::<f64>() / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cfg(gamma: f64, schedule: Schedule) -> EoLossConfig {
        EoLossConfig {
            gamma,
            schedule,
            step: 100,
            ..EoLossConfig::default()
        }
    }

    #[test]
    fn bce_examples() {
        let l = bce_map(&[1.0f64, 0.5, 0.5, 0.9], &[1.0, 0.0, 1.0, 1.0], 1e-7).unwrap();
        assert!(l[0] < 1e-6);
        assert!((l[1] - core::f64::consts::LN_2).abs() < 1e-6);
        assert!((l[2] - core::f64::consts::LN_2).abs() < 1e-6);
        assert!((l[3] - 0.10536).abs() < 1e-5);
    }

    #[test]
    fn hardness_examples() {
        let w = hardness_weights(&[0.3f64, 1.0, 0.8], &[1.0, 1.0, 0.0], 2.0, false).unwrap();
        assert!((w[0] - 0.49).abs() < 1e-12);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - 0.64).abs() < 1e-12);
        let w0 = hardness_weights(&[0.3f64, 1.0, 0.0], &[1.0, 0.0, 1.0], 0.0, false).unwrap();
        assert!(w0.iter().all(|&v| v == 1.0));
        // literal form treats a confident true negative as hard
        let lit = hardness_weights(&[0.0f64], &[0.0], 2.0, true).unwrap();
        assert_eq!(lit[0], 1.0);
    }

    #[test]
    fn normalizer_examples() {
        assert_eq!(normalizer(&[1.0, 1.0, 1.0], &[0.3, 0.2, 0.9], 1e-7).unwrap(), 1.0);
        assert!((normalizer(&[0.25, 0.75], &[1.0, 1.0], 1e-7).unwrap() - 0.5).abs() < 1e-15);
        assert!((normalizer(&[0.5, 0.9], &[2.0, 0.0], 1e-7).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(normalizer(&[0.5, 0.9], &[0.0, 0.0], 1e-7).unwrap(), 1.0);
        assert!(normalizer(&[0.5], &[1.0, 2.0], 1e-7).is_err());
    }

    #[test]
    fn schedule_examples() {
        let mut c = cfg(2.0, Schedule::Linear);
        assert_eq!(lambda_schedule(ScheduleState { t: 0 }, &c), 1.0);
        assert_eq!(lambda_schedule(ScheduleState { t: 100 }, &c), 0.0);
        assert_eq!(lambda_schedule(ScheduleState { t: 250 }, &c), 0.0);
        c.schedule = Schedule::Cosine;
        assert!((lambda_schedule(ScheduleState { t: 50 }, &c) - 0.5).abs() < 1e-15);
        c.schedule = Schedule::Exponential;
        c.decay = 2.0;
        assert!((lambda_schedule(ScheduleState { t: 50 }, &c) - 0.25).abs() < 1e-15);
        c.schedule = Schedule::None;
        assert_eq!(lambda_schedule(ScheduleState { t: 0 }, &c), 0.0);
    }

    #[test]
    fn eo_two_pixel_hand_example() {
        // L = [1.0, 0.2], w = [0.9, 0.1], lambda = 0
        let bce = [1.0, 0.2];
        let w = [0.9, 0.1];
        let z = normalizer(&w, &bce, 1e-7).unwrap();
        assert!((z - 0.92 / 1.2).abs() < 1e-12);
        let m: Vec<f64> = bce
            .iter()
            .zip(&w)
            .map(|(&l, &w)| pixel_coefficient(0.0, w / z) * l)
            .collect();
        assert!((m[0] - 1.173_913_043_478_261).abs() < 1e-12);
        assert!((m[1] - 0.026_086_956_521_739).abs() < 1e-12);
        assert!((m[0] + m[1] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn reductions_are_exact() {
        let p = [0.1f64, 0.7, 0.95, 0.4, 0.0, 1.0];
        let y = [0.0f64, 1.0, 1.0, 0.0, 1.0, 0.0];
        let bce = bce_map(&p, &y, 1e-7).unwrap();
        let (v, batch) = eo_loss(&p, &y, ScheduleState { t: 40 }, &cfg(0.0, Schedule::Linear)).unwrap();
        assert_eq!(batch.weighted, bce);
        assert_eq!(v, bce.iter().sum::<f64>() / 6.0);
        let (_, batch) = eo_loss(&p, &y, ScheduleState { t: 0 }, &cfg(3.0, Schedule::Cosine)).unwrap();
        assert_eq!(batch.weighted, bce);
    }

    #[test]
    fn mismatched_lengths_error() {
        assert!(bce_map(&[0.5f64], &[1.0, 0.0], 1e-7).is_err());
        let r = compute_loss(
            LossKind::Eo,
            &[0.5f64, 0.2],
            &[1.0],
            ScheduleState::default(),
            &EoLossConfig::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EoLossConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(EoLossConfig { step: 0, ..Default::default() }.validate().is_err());
        assert!(EoLossConfig { eps: 0.1, ..Default::default() }.validate().is_err());
        assert!(EoLossConfig { decay: 0.0, ..Default::default() }.validate().is_err());
        assert!(EoLossConfig::default().validate().is_ok());
    }

    #[test]
    fn hard_mass_share_top_decile() {
        let w = vec![0.0, 0.1, 0.9, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.05];
        let m = vec![1.0; 10];
        assert!((hard_mass_share(&w, &m, 0.1) - 0.1).abs() < 1e-15);
    }
}
