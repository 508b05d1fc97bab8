//! Deterministic synthetic bitemporal scenes with hard-case injection.
//!
//! A scene is a value-noise background with rectangular and elliptical
//! objects. Change operations add, remove or move objects between the two
//! dates, and the change mask is exactly the set of pixels where the clean
//! renders differ. Hard cases (cast shadows, translucent occluders, clusters
//! of small targets, a global seasonal shift) and sensor noise are applied
//! afterwards, so they alter the images but never the mask.

mod augment;
mod render;
mod scene;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::LabeledPair;

pub use augment::{augment, augment_with, tile, AugmentParams, Transform};
pub use render::{background, diff_support, render, render_clean};
pub use scene::{
    ChangeKind, ChangeOp, HardCase, Object, Occluder, SceneSpec, SeasonalShift, SensorNoise, Shape,
    LIGHT_VECTOR, SMALL_TARGET_DIAMETER,
};

/// Scene sampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of objects present at the first date.
    pub persistent_objects: (usize, usize),
    /// Inclusive range of object half-extents in pixels.
    pub object_half_size: (f64, f64),
    /// Inclusive range of the changed-pixel fraction.
    pub change_fraction: (f64, f64),
    /// Probability that a change is rendered as a hard case.
    pub hard_case_rate: f64,
    /// Probability of a global seasonal shift on the second image.
    pub seasonal_rate: f64,
    /// Standard deviation of the additive sensor noise (8-bit units).
    pub noise_std: f64,
    /// Render shadows, occluders, seasonal shift and noise.
    pub perturb: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            persistent_objects: (4, 10),
            object_half_size: (7.0, 22.0),
            change_fraction: (0.02, 0.20),
            hard_case_rate: 0.3,
            seasonal_rate: 0.3,
            noise_std: 3.0,
            perturb: true,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        crate::encoder::check_divisible(self.height, self.width)?;
        let (lo, hi) = self.change_fraction;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidConfig(alloc::format!(
                "change fraction range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
            )));
        }
        let (a, b) = self.object_half_size;
        if !(a >= 1.0 && a <= b && 2.0 * b < self.width.min(self.height) as f64) {
            return Err(Error::InvalidConfig(alloc::format!(
                "object half size range ({a}, {b}) does not fit the canvas"
            )));
        }
        if self.persistent_objects.0 > self.persistent_objects.1 {
            return Err(Error::InvalidConfig("persistent object range is empty".into()));
        }
        for (name, rate) in [("hard case rate", self.hard_case_rate), ("seasonal rate", self.seasonal_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidConfig(alloc::format!("{name} {rate} outside [0, 1]")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig("noise std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 64;

/// Samples a scene whose changed fraction lies in the configured range.
pub fn scene_spec(seed: u64, params: &SynthParams) -> Result<SceneSpec> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas = (params.width * params.height) as f64;
    let (lo, hi) = params.change_fraction;
    for _ in 0..MAX_ATTEMPTS {
        let spec = scene::sample_scene(&mut rng, params);
        let (c1, c2) = render_clean(&spec)?;
        let changed = diff_support(&c1, &c2)?.pixels().iter().filter(|&&m| m != 0).count();
        let frac = changed as f64 / canvas;
        if (lo..=hi).contains(&frac) {
            return Ok(spec);
        }
    }
    Err(Error::Generation(alloc::format!(
        "no scene within change fraction [{lo}, {hi}] after {MAX_ATTEMPTS} attempts"
    )))
}

/// Deterministic labeled pair for `seed`.
pub fn generate_pair(seed: u64, params: &SynthParams) -> Result<LabeledPair> {
    let spec = scene_spec(seed, params)?;
    render(&spec, params.perturb)
}
