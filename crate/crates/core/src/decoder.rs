//! Dual-branch fusion and the lightweight decoder.
//!
//! Per level the two relation-enhanced branches are fused by absolute
//! difference. An upsampling path brings every level to stride 4 (level `i`
//! gets `i - 1` rounds of conv-BN-ReLU + bilinear x2, level 1 a single
//! conv-BN-ReLU), the four maps are averaged and mixed by a 1x1 conv. The
//! same structure with separate weights decodes the difference pyramid; the
//! two results are concatenated and a conv + two stride-2 deconvolutions
//! restore full resolution before the sigmoid.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_mismatch, Result};
use crate::fs_relation::RelationEnhancedPyramid;
use crate::graph::Var;
use crate::nn::{BatchNorm2d, Conv2d, ConvBn, Ctx, Deconv2d};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// `C_i = |R_i^1 - R_i^2|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffPyramid {
    pub levels: [Var; 4],
}

/// Conv-BN-ReLU rounds bringing one level to stride 4.
#[derive(Debug, Clone)]
pub struct UpsampleLevel {
    convs: Vec<ConvBn>,
    /// Number of bilinear x2 steps (`level - 1`).
    upsamples: usize,
}

impl UpsampleLevel {
    /// `level` is 1-based (1 = stride 4).
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        level: usize,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        let rounds = level.saturating_sub(1).max(1);
        let convs = (0..rounds)
            .map(|r| {
                let c_in = if r == 0 { in_ch } else { out_ch };
                ConvBn::new(store, &format!("{name}.conv{r}"), c_in, out_ch, 3, 1, true, rng)
            })
            .collect();
        Self {
            convs,
            upsamples: level.saturating_sub(1),
        }
    }

    pub fn upsamples(&self) -> usize {
        self.upsamples
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let mut y = x;
        for (r, conv) in self.convs.iter().enumerate() {
            y = conv.forward(cx, y)?;
            if r < self.upsamples {
                y = cx.graph.upsample_bilinear2(y)?;
            }
        }
        Ok(y)
    }
}

/// Upsampling of all four levels plus mean aggregation and a 1x1 mix.
#[derive(Debug, Clone)]
pub struct Deo {
    levels: Vec<UpsampleLevel>,
    mix: Conv2d,
}

impl Deo {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        let levels = (1..=4)
            .map(|l| UpsampleLevel::new(store, &format!("{name}.level{l}"), l, in_ch, out_ch, rng))
            .collect();
        let mix = Conv2d::new(store, &format!("{name}.mix"), out_ch, out_ch, 1, 1, 0, true, rng);
        Self { levels, mix }
    }

    pub fn level(&self, i: usize) -> &UpsampleLevel {
        &self.levels[i]
    }

    pub fn mix(&self) -> &Conv2d {
        &self.mix
    }

    pub fn upsample_level<F: Scalar>(&self, cx: &mut Ctx<'_, F>, level: usize, x: Var) -> Result<Var> {
        self.levels[level].forward(cx, x)
    }

    /// Pointwise mean of the four stride-4 maps, then the 1x1 mix.
    pub fn aggregate<F: Scalar>(&self, cx: &mut Ctx<'_, F>, maps: [Var; 4]) -> Result<Var> {
        let mean = cx.graph.mean(&maps)?;
        self.mix.forward(cx, mean)
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, pyramid: [Var; 4]) -> Result<Var> {
        let mut up = pyramid;
        for (i, &p) in pyramid.iter().enumerate() {
            up[i] = self.upsample_level(cx, i, p)?;
        }
        self.aggregate(cx, up)
    }
}

/// Fusion conv, deconv-BN-ReLU, deconv-BN, sigmoid.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    fuse: ConvBn,
    deconv1: Deconv2d,
    bn1: BatchNorm2d,
    deconv2: Deconv2d,
    bn2: BatchNorm2d,
}

/// Logits and probabilities, both `[n, 1, h, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub logits: Var,
    pub probs: Var,
}

impl PredictionHead {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        in_ch: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fuse: ConvBn::new(store, "head.fuse", in_ch, width, 3, 1, true, rng),
            deconv1: Deconv2d::new(store, "head.deconv1", width, width, 4, 2, 1, false, rng),
            bn1: BatchNorm2d::new(store, "head.bn1", width),
            deconv2: Deconv2d::new(store, "head.deconv2", width, 1, 4, 2, 1, false, rng),
            bn2: BatchNorm2d::new(store, "head.bn2", 1),
        }
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, fused: Var) -> Result<Prediction> {
        let y = self.fuse.forward(cx, fused)?;
        let y = self.deconv1.forward(cx, y)?;
        let y = self.bn1.forward(cx, y)?;
        let y = cx.graph.relu(y);
        let y = self.deconv2.forward(cx, y)?;
        let logits = self.bn2.forward(cx, y)?;
        let probs = cx.graph.sigmoid(logits);
        Ok(Prediction { logits, probs })
    }
}

pub fn fuse_level_diff<F: Scalar>(
    cx: &mut Ctx<'_, F>,
    r1: &RelationEnhancedPyramid,
    r2: &RelationEnhancedPyramid,
) -> Result<DiffPyramid> {
    let mut levels = r1.levels;
    for i in 0..4 {
        levels[i] = cx.graph.abs_diff(r1.levels[i], r2.levels[i])?;
    }
    Ok(DiffPyramid { levels })
}

/// `t = |M^1 - M^2|`.
pub fn branch_diff<F: Scalar>(cx: &mut Ctx<'_, F>, m1: Var, m2: Var) -> Result<Var> {
    cx.graph.abs_diff(m1, m2)
}

/// Channel concatenation `[t, deo(C)]`.
pub fn skip_concat<F: Scalar>(cx: &mut Ctx<'_, F>, t: Var, deo_c: Var) -> Result<Var> {
    let (ts, cs) = (cx.graph.value(t).shape(), cx.graph.value(deo_c).shape());
    if ts.len() != 4 || cs.len() != 4 || ts[0] != cs[0] || ts[2..] != cs[2..] {
        return Err(shape_mismatch("skip_concat", ts, cs));
    }
    cx.graph.concat_channels(&[t, deo_c])
}
