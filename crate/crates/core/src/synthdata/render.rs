//! Rasterization of a [`SceneSpec`].

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::Result;
use crate::raster::{Grid, HardnessMap, HardnessTag, ImagePair, LabeledPair, Mask, RgbImage};

use super::scene::{HardCase, Object, SceneSpec, LIGHT_VECTOR};

fn hash64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = hash64(seed ^ hash64((ix as u64).wrapping_mul(0x1f1f_1f1f) ^ (iy as u64).rotate_left(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (ix, iy) = (gx.floor() as i64, gy.floor() as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
    let top = lattice(seed, ix, iy) * (1.0 - tx) + lattice(seed, ix + 1, iy) * tx;
    let bottom = lattice(seed, ix, iy + 1) * (1.0 - tx) + lattice(seed, ix + 1, iy + 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Two-octave value-noise blend of the palette colors.
pub fn background(spec: &SceneSpec) -> RgbImage {
    let [a, b] = spec.palette;
    Grid::from_fn(spec.width, spec.height, |x, y| {
        let (px, py) = (x as f64, y as f64);
        let t = 0.7 * value_noise(spec.background_seed, px, py, 32.0)
            + 0.3 * value_noise(spec.background_seed ^ 0x5eed, px, py, 8.0);
        core::array::from_fn(|c| (a[c] as f64 * (1.0 - t) + b[c] as f64 * t).round() as u8)
    })
}

fn draw(img: &mut RgbImage, objects: &[Object]) {
    let (w, h) = img.dims();
    for o in objects {
        for (x, y) in o.pixels(w, h) {
            img.set(x, y, o.fill);
        }
    }
}

/// Unperturbed renders of both dates.
pub fn render_clean(spec: &SceneSpec) -> Result<(RgbImage, RgbImage)> {
    spec.validate()?;
    let bg = background(spec);
    let mut t1 = bg.clone();
    let mut t2 = bg;
    draw(&mut t1, &spec.objects_at(false));
    draw(&mut t2, &spec.objects_at(true));
    Ok((t1, t2))
}

/// Pixels where the two renders differ in any channel.
pub fn diff_support(t1: &RgbImage, t2: &RgbImage) -> Result<Mask> {
    t1.check_dims("diff support", t2)?;
    let data = t1
        .pixels()
        .iter()
        .zip(t2.pixels())
        .map(|(a, b)| u8::from(a != b))
        .collect();
    Grid::from_vec(t1.width(), t1.height(), data)
}

fn shadow_pixels(o: &Object, w: usize, h: usize) -> Vec<(usize, usize)> {
    let (sx, sy) = LIGHT_VECTOR;
    let mut out = Vec::new();
    for (x, y) in o.pixels(w, h) {
        let (tx, ty) = (x as i64 + sx, y as i64 + sy);
        if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
            continue;
        }
        let (tx, ty) = (tx as usize, ty as usize);
        if !o.contains(tx, ty) {
            out.push((tx, ty));
        }
    }
    out
}

fn darken(img: &mut RgbImage, pixels: &[(usize, usize)]) {
    for &(x, y) in pixels {
        let px = img.get(x, y);
        img.set(x, y, px.map(|c| (c as f64 * 0.5).round() as u8));
    }
}

fn blend(px: [u8; 3], color: [u8; 3], alpha: f64) -> [u8; 3] {
    core::array::from_fn(|c| (px[c] as f64 * (1.0 - alpha) + color[c] as f64 * alpha).round() as u8)
}

/// Irwin-Hall approximation of a standard normal draw.
fn gaussian(seed: u64, index: u64) -> f64 {
    let u = |k: u64| (hash64(seed ^ hash64(index.wrapping_mul(3).wrapping_add(k))) >> 11) as f64 / (1u64 << 53) as f64;
    (u(0) + u(1) + u(2) - 1.5) * 2.0
}

fn add_noise(img: &mut RgbImage, std: f64, seed: u64) {
    for (i, px) in img.pixels_mut().iter_mut().enumerate() {
        for (c, v) in px.iter_mut().enumerate() {
            let n = gaussian(seed, (i * 3 + c) as u64) * std;
            *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Full render: clean images, change mask, hardness tags and perturbations.
///
/// With `perturb == false` the images are the clean renders; the mask and
/// the tags do not depend on the flag.
pub fn render(spec: &SceneSpec, perturb: bool) -> Result<LabeledPair> {
    let (clean1, clean2) = render_clean(spec)?;
    let mask = diff_support(&clean1, &clean2)?;
    let (w, h) = (spec.width, spec.height);
    let mut tags: HardnessMap = Grid::filled(w, h, HardnessTag::Easy);
    let (mut t1, mut t2) = (clean1, clean2);

    for op in &spec.changes {
        let Some(hard) = &op.hard else { continue };
        let (before, after) = spec.change_silhouettes(op);
        let tag = match hard {
            HardCase::Shadow => HardnessTag::Shadow,
            HardCase::Occlusion(_) => HardnessTag::Occluded,
            HardCase::SmallTarget => HardnessTag::SmallTarget,
        };
        for o in before.iter().chain(after.iter()) {
            for (x, y) in o.pixels(w, h) {
                tags.set(x, y, tag);
            }
        }
        match hard {
            HardCase::Shadow => {
                for (o, img) in [(before, &mut t1), (after, &mut t2)] {
                    let Some(o) = o else { continue };
                    let shade = shadow_pixels(&o, w, h);
                    for &(x, y) in &shade {
                        tags.set(x, y, tag);
                    }
                    if perturb {
                        darken(img, &shade);
                    }
                }
            }
            HardCase::Occlusion(occ) => {
                let subject = after.or(before).expect("every change has a silhouette");
                let (x0, y0, x1, y1) = subject.bounds(w, h);
                let r = occ.discs.iter().map(|d| d.2).fold(0.0, f64::max).ceil() as usize;
                for y in y0.saturating_sub(r)..(y1 + r).min(h) {
                    for x in x0.saturating_sub(r)..(x1 + r).min(w) {
                        if !occ.contains(x, y) {
                            continue;
                        }
                        tags.set(x, y, tag);
                        if perturb {
                            t1.set(x, y, blend(t1.get(x, y), occ.color, occ.opacity));
                            t2.set(x, y, blend(t2.get(x, y), occ.color, occ.opacity));
                        }
                    }
                }
            }
            HardCase::SmallTarget => {}
        }
    }

    if let Some(shift) = spec.seasonal {
        for (tag, &m) in tags.pixels_mut().iter_mut().zip(mask.pixels()) {
            if m == 0 && *tag == HardnessTag::Easy {
                *tag = HardnessTag::SeasonalOnly;
            }
        }
        if perturb {
            for px in t2.pixels_mut() {
                *px = core::array::from_fn(|c| {
                    (px[c] as f64 * shift.gain + shift.offset[c]).round().clamp(0.0, 255.0) as u8
                });
            }
        }
    }
    if let (Some(noise), true) = (spec.noise, perturb) {
        add_noise(&mut t1, noise.std, noise.seed);
        add_noise(&mut t2, noise.std, hash64(noise.seed));
    }
    LabeledPair::new(ImagePair::new(t1, t2)?, mask, tags)
}
