//! Siamese residual backbone and variant feature pyramid.
//!
//! The backbone produces four stages at strides 4/8/16/32. The pyramid runs
//! top-down: `P4 = lateral(F4)` and `P_i = lateral(F_i) + nearest_up2(P_{i+1})`
//! where every lateral is a plain 1x1 convolution to the pyramid width.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Conv2d, ConvBn, Ctx};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Input side lengths must be multiples of the deepest stride.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Channel width of each of the four stages.
    pub widths: [usize; 4],
    /// Residual blocks per stage.
    pub blocks: [usize; 4],
    /// Channel width `d` shared by all pyramid levels.
    pub pyramid_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            blocks: [2, 2, 2, 2],
            pyramid_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) || self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::InvalidConfig(
                "stage widths and block counts must be positive".into(),
            ));
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidConfig(format!(
                "stage widths must be nondecreasing, got {:?}",
                self.widths
            )));
        }
        if self.pyramid_dim == 0 {
            return Err(Error::InvalidConfig("pyramid_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone stages `F1..F4` (strides 4, 8, 16, 32).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageFeatures {
    pub levels: [Var; 4],
}

/// Pyramid levels `P1..P4`, all with `pyramid_dim` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            ConvBn::new(store, &format!("{name}.shortcut"), in_ch, out_ch, 1, stride, false, rng)
        });
        Self {
            conv1: ConvBn::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, true, rng),
            conv2: ConvBn::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, false, rng),
            shortcut,
        }
    }

    fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.conv2.forward(cx, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(cx, x)?,
            None => x,
        };
        let sum = cx.graph.add(y, skip)?;
        Ok(cx.graph.relu(sum))
    }
}

/// Weight-shared feature extractor plus top-down pyramid.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: BackboneConfig,
    stem: [ConvBn; 2],
    stages: Vec<Vec<ResidualBlock>>,
    lateral: Vec<Conv2d>,
}

impl Encoder {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w0 = cfg.widths[0];
        let stem = [
            ConvBn::new(store, "encoder.stem.0", 3, w0, 3, 2, true, rng),
            ConvBn::new(store, "encoder.stem.1", w0, w0, 3, 2, true, rng),
        ];
        let mut stages = Vec::new();
        let mut in_ch = w0;
        for (s, (&width, &blocks)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                stage.push(ResidualBlock::new(
                    store,
                    &format!("encoder.stage{}.block{b}", s + 1),
                    in_ch,
                    width,
                    stride,
                    rng,
                ));
                in_ch = width;
            }
            stages.push(stage);
        }
        let lateral = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                Conv2d::new(
                    store,
                    &format!("encoder.lateral{}", i + 1),
                    w,
                    cfg.pyramid_dim,
                    1,
                    1,
                    0,
                    true,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            lateral,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Lateral 1x1 convolutions, level 1 first.
    pub fn lateral(&self) -> &[Conv2d] {
        &self.lateral
    }

    /// Runs the backbone on a `[n, 3, h, w]` batch.
    pub fn extract_features<F: Scalar>(&self, cx: &mut Ctx<'_, F>, image: Var) -> Result<StageFeatures> {
        let shape = cx.graph.value(image).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::InvalidInput(format!(
                "expected a [n, 3, h, w] image batch, got {shape:?}"
            )));
        }
        check_divisible(shape[2], shape[3])?;
        let mut x = self.stem[0].forward(cx, image)?;
        x = self.stem[1].forward(cx, x)?;
        let mut levels = [x; 4];
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(cx, x)?;
            }
            levels[s] = x;
        }
        Ok(StageFeatures { levels })
    }

    pub fn build_pyramid<F: Scalar>(&self, cx: &mut Ctx<'_, F>, f: &StageFeatures) -> Result<FeaturePyramid> {
        let mut levels = f.levels;
        let mut above = self.lateral[3].forward(cx, f.levels[3])?;
        levels[3] = above;
        for i in (0..3).rev() {
            let lat = self.lateral[i].forward(cx, f.levels[i])?;
            let up = cx.graph.upsample_nearest2(above)?;
            above = cx.graph.add(lat, up)?;
            levels[i] = above;
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn forward<F: Scalar>(&self, cx: &mut Ctx<'_, F>, image: Var) -> Result<FeaturePyramid> {
        let f = self.extract_features(cx, image)?;
        self.build_pyramid(cx, &f)
    }
}

pub fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % INPUT_MULTIPLE != 0 || width % INPUT_MULTIPLE != 0 {
        return Err(Error::NotDivisible {
            height,
            width,
            multiple: INPUT_MULTIPLE,
        });
    }
    Ok(())
}
