//! Tiling and geometric augmentation of labeled pairs.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::raster::{Grid, ImagePair, LabeledPair};

/// Row-major tiles of `size x size`, stepping by `size - overlap`. Edges
/// that do not fill a whole tile are dropped.
pub fn tile(lp: &LabeledPair, size: usize, overlap: usize) -> Result<Vec<LabeledPair>> {
    if size == 0 || size % INPUT_MULTIPLE != 0 {
        return Err(Error::InvalidInput(alloc::format!(
            "tile size {size} must be a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    if overlap >= size {
        return Err(Error::InvalidInput(alloc::format!(
            "tile overlap {overlap} must be smaller than the tile size {size}"
        )));
    }
    let (w, h) = lp.dims();
    if w < size || h < size {
        return Err(Error::InvalidInput(alloc::format!(
            "{w}x{h} image is smaller than a {size}x{size} tile"
        )));
    }
    let stride = size - overlap;
    let mut tiles = Vec::new();
    for ty in 0..=(h - size) / stride {
        for tx in 0..=(w - size) / stride {
            let (x0, y0) = (tx * stride, ty * stride);
            tiles.push(LabeledPair {
                pair: ImagePair {
                    t1: lp.pair.t1.crop(x0, y0, size, size)?,
                    t2: lp.pair.t2.crop(x0, y0, size, size)?,
                },
                mask: lp.mask.crop(x0, y0, size, size)?,
                hardness: lp.hardness.crop(x0, y0, size, size)?,
            });
        }
    }
    Ok(tiles)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Allow 90-degree rotations (only used on square inputs; 180 always allowed).
    pub rotate: bool,
    pub flip: bool,
    /// Probability of a central crop followed by a resize to the input size.
    pub crop_prob: f64,
    /// Range of the crop side relative to the input side.
    pub crop_scale: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotate: true,
            flip: true,
            crop_prob: 0.5,
            crop_scale: (0.75, 1.0),
        }
    }
}

/// Rotation by `quarter_turns * 90` degrees clockwise, then the flips, then
/// an optional central crop of relative side `crop` resized back with
/// nearest-neighbour sampling.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Transform {
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
    pub crop: Option<f64>,
}

impl Transform {
    pub fn sample<R: Rng>(rng: &mut R, params: &AugmentParams, square: bool) -> Self {
        let quarter_turns = if params.rotate {
            let k = rng.random_range(0..4u8);
            if square {
                k
            } else {
                k & 2
            }
        } else {
            0
        };
        let flip_h = params.flip && rng.random_bool(0.5);
        let flip_v = params.flip && rng.random_bool(0.5);
        let crop = (params.crop_prob > 0.0 && rng.random_bool(params.crop_prob.min(1.0)))
            .then(|| rng.random_range(params.crop_scale.0..=params.crop_scale.1));
        Self {
            quarter_turns,
            flip_h,
            flip_v,
            crop,
        }
    }

    /// Output dimensions for a `w x h` input.
    pub fn output_dims(&self, w: usize, h: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (h, w)
        } else {
            (w, h)
        }
    }

    /// Source pixel of output pixel `(x, y)` for a `w x h` input.
    pub fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        let (rw, rh) = self.output_dims(w, h);
        let (mut u, mut v) = (x, y);
        if let Some(scale) = self.crop {
            let cw = ((rw as f64 * scale).round() as usize).clamp(1, rw);
            let ch = ((rh as f64 * scale).round() as usize).clamp(1, rh);
            let (x0, y0) = ((rw - cw) / 2, (rh - ch) / 2);
            u = x0 + ((x * cw) / rw).min(cw - 1);
            v = y0 + ((y * ch) / rh).min(ch - 1);
        }
        if self.flip_v {
            v = rh - 1 - v;
        }
        if self.flip_h {
            u = rw - 1 - u;
        }
        // undo the clockwise rotation one quarter turn at a time
        let (mut sw, mut sh) = (rw, rh);
        for _ in 0..self.quarter_turns % 4 {
            // a clockwise turn maps src(v, w_dst - 1 - u) to dst(u, v)
            let (su, sv) = (v, sw - 1 - u);
            u = su;
            v = sv;
            core::mem::swap(&mut sw, &mut sh);
        }
        (u, v)
    }

    pub fn apply<T: Copy>(&self, g: &Grid<T>) -> Grid<T> {
        let (w, h) = g.dims();
        let (ow, oh) = self.output_dims(w, h);
        Grid::from_fn(ow, oh, |x, y| {
            let (sx, sy) = self.source(x, y, w, h);
            g.get(sx, sy)
        })
    }

    pub fn apply_pair(&self, lp: &LabeledPair) -> LabeledPair {
        LabeledPair {
            pair: ImagePair {
                t1: self.apply(&lp.pair.t1),
                t2: self.apply(&lp.pair.t2),
            },
            mask: self.apply(&lp.mask),
            hardness: self.apply(&lp.hardness),
        }
    }
}

/// Random rotation, flips and central crop with the default parameters.
pub fn augment(lp: &LabeledPair, seed: u64) -> LabeledPair {
    augment_with(lp, seed, &AugmentParams::default())
}

pub fn augment_with(lp: &LabeledPair, seed: u64, params: &AugmentParams) -> LabeledPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = lp.dims();
    Transform::sample(&mut rng, params, w == h).apply_pair(lp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Grid<u32> {
        Grid::from_fn(w, h, |x, y| (y * w + x) as u32)
    }

    #[test]
    fn quarter_turn_is_clockwise() {
        let g = ramp(3, 2);
        let t = Transform {
            quarter_turns: 1,
            ..Default::default()
        };
        let r = t.apply(&g);
        assert_eq!(r.dims(), (2, 3));
        // first column bottom-to-top becomes the first row
        assert_eq!(r.pixels(), &[3, 0, 4, 1, 5, 2]);
    }

    #[test]
    fn four_quarter_turns_compose_to_identity() {
        let g = ramp(4, 4);
        let t = Transform {
            quarter_turns: 1,
            ..Default::default()
        };
        let mut r = g.clone();
        for _ in 0..4 {
            r = t.apply(&r);
        }
        assert_eq!(r, g);
    }

    #[test]
    fn flips_reverse_axes() {
        let g = ramp(3, 2);
        let h = Transform {
            flip_h: true,
            ..Default::default()
        };
        assert_eq!(h.apply(&g).pixels(), &[2, 1, 0, 5, 4, 3]);
        let v = Transform {
            flip_v: true,
            ..Default::default()
        };
        assert_eq!(v.apply(&g).pixels(), &[3, 4, 5, 0, 1, 2]);
    }

    #[test]
    fn central_crop_samples_center() {
        let g = ramp(8, 8);
        let t = Transform {
            crop: Some(0.5),
            ..Default::default()
        };
        let r = t.apply(&g);
        assert_eq!(r.dims(), (8, 8));
        assert_eq!(r.get(0, 0), g.get(2, 2));
        assert_eq!(r.get(7, 7), g.get(5, 5));
    }
}
