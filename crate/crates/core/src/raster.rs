//! Row-major rasters and their conversion to network tensors.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major `height x width` grid of pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type RgbImage = Grid<[u8; 3]>;
/// Binary change mask with values in `{0, 1}`.
pub type Mask = Grid<u8>;
pub type HardnessMap = Grid<HardnessTag>;

impl<T: Copy> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: alloc::vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{} pixels for a {width}x{height} raster",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[T] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the `w x h` window at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_dims<U>(&self, op: &'static str, other: &Grid<U>) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(shape_mismatch(op, &[self.height, self.width], &[other.height, other.width]))
        }
    }
}

/// Why a pixel is hard. Tags partition the pixels of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[repr(u8)]
pub enum HardnessTag {
    #[default]
    Easy = 0,
    Shadow = 1,
    Occluded = 2,
    SmallTarget = 3,
    /// Unchanged pixel whose appearance moved only through the global shift.
    SeasonalOnly = 4,
}

impl HardnessTag {
    pub const ALL: [HardnessTag; 5] = [
        HardnessTag::Easy,
        HardnessTag::Shadow,
        HardnessTag::Occluded,
        HardnessTag::SmallTarget,
        HardnessTag::SeasonalOnly,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            HardnessTag::Easy => "easy",
            HardnessTag::Shadow => "shadow",
            HardnessTag::Occluded => "occluded",
            HardnessTag::SmallTarget => "small-target",
            HardnessTag::SeasonalOnly => "seasonal-only",
        }
    }

    pub fn is_hard(self) -> bool {
        self != HardnessTag::Easy
    }
}

/// Co-registered images of the two dates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePair {
    pub t1: RgbImage,
    pub t2: RgbImage,
}

impl ImagePair {
    pub fn new(t1: RgbImage, t2: RgbImage) -> Result<Self> {
        t1.check_dims("image pair", &t2)?;
        Ok(Self { t1, t2 })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.t1.dims()
    }
}

/// Image pair with its ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub pair: ImagePair,
    pub mask: Mask,
    pub hardness: HardnessMap,
}

impl LabeledPair {
    pub fn new(pair: ImagePair, mask: Mask, hardness: HardnessMap) -> Result<Self> {
        pair.t1.check_dims("labeled pair", &mask)?;
        pair.t1.check_dims("labeled pair", &hardness)?;
        if mask.pixels().iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self { pair, mask, hardness })
    }

    /// Pair without hardness information: every pixel tagged easy.
    pub fn untagged(pair: ImagePair, mask: Mask) -> Result<Self> {
        let hardness = Grid::filled(mask.width(), mask.height(), HardnessTag::Easy);
        Self::new(pair, mask, hardness)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

/// Maps 8-bit intensities to roughly `[-1, 1]`.
#[inline]
pub fn normalize_intensity(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Stacks images into a `[n, 3, h, w]` tensor.
pub fn images_to_tensor<F: Scalar>(images: &[&RgbImage]) -> Result<Tensor<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let (w, h) = first.dims();
    let plane = w * h;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        first.check_dims("image batch", img)?;
        for c in 0..3 {
            data.extend(img.pixels().iter().map(|px| F::of(normalize_intensity(px[c]))));
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// Stacks masks into a `[n, 1, h, w]` tensor of zeros and ones.
pub fn masks_to_tensor<F: Scalar>(masks: &[&Mask]) -> Result<Tensor<F>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidInput("empty mask batch".into()))?;
    let (w, h) = first.dims();
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        first.check_dims("mask batch", m)?;
        data.extend(m.pixels().iter().map(|&v| if v != 0 { F::one() } else { F::zero() }));
    }
    Tensor::from_vec(&[masks.len(), 1, h, w], data)
}

/// Splits a `[n, 1, h, w]` probability tensor into per-item grids.
pub fn tensor_to_prob_maps<F: Scalar>(probs: &Tensor<F>) -> Result<Vec<Grid<f64>>> {
    if probs.shape().len() != 4 || probs.shape()[1] != 1 {
        return Err(Error::InvalidInput(format!(
            "expected [n, 1, h, w] probabilities, got {:?}",
            probs.shape()
        )));
    }
    let (n, _, h, w) = probs.dims4();
    (0..n)
        .map(|i| Grid::from_vec(w, h, probs.item(i).iter().map(|v| v.as_f64()).collect()))
        .collect()
}

/// `prob >= threshold` per pixel.
pub fn threshold(probs: &Grid<f64>, threshold: f64) -> Mask {
    probs.map(|p| u8::from(p >= threshold))
}
