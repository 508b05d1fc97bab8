//! Scene description and its random sampling.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

use super::SynthParams;

/// Object diameters below this count as small targets.
pub const SMALL_TARGET_DIAMETER: f64 = 12.0;

/// Offset of every shadow from its object, in pixels.
pub const LIGHT_VECTOR: (i64, i64) = (5, 4);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Ellipse,
}

/// Axis-aligned rectangle or ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
    pub fill: [u8; 3],
}

impl Object {
    /// Whether the center of pixel `(x, y)` lies inside the object.
    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.half_w;
        let dy = (y as f64 + 0.5 - self.cy) / self.half_h;
        match self.shape {
            Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }

    /// Pixel window `[x0, x1) x [y0, y1)` covering the object, clipped.
    pub fn bounds(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let clip = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
        (
            clip((self.cx - self.half_w).floor(), width),
            clip((self.cy - self.half_h).floor(), height),
            clip((self.cx + self.half_w).ceil() + 1.0, width),
            clip((self.cy + self.half_h).ceil() + 1.0, height),
        )
    }

    pub fn inside_canvas(&self, width: usize, height: usize) -> bool {
        self.half_w > 0.0
            && self.half_h > 0.0
            && self.cx - self.half_w >= 0.0
            && self.cy - self.half_h >= 0.0
            && self.cx + self.half_w <= width as f64
            && self.cy + self.half_h <= height as f64
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.half_w.max(self.half_h)
    }

    pub fn area(&self) -> f64 {
        match self.shape {
            Shape::Rect => 4.0 * self.half_w * self.half_h,
            Shape::Ellipse => core::f64::consts::PI * self.half_w * self.half_h,
        }
    }

    pub fn moved(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Pixels covered by the object.
    pub fn pixels(&self, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (x0, y0, x1, y1) = self.bounds(width, height);
        (y0..y1)
            .flat_map(move |y| (x0..x1).map(move |x| (x, y)))
            .filter(|&(x, y)| self.contains(x, y))
    }
}

/// Semantic change between the two dates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChangeKind {
    /// New object present only in the second image.
    Add(Object),
    /// Persistent object `index` disappears.
    Remove(usize),
    /// Persistent object `index` is displaced.
    Move { index: usize, dx: f64, dy: f64 },
}

/// Translucent blob drawn over an object in both images.
#[derive(Debug, Clone, PartialEq)]
pub struct Occluder {
    /// `(cx, cy, radius)` discs whose union is the blob.
    pub discs: Vec<(f64, f64, f64)>,
    pub color: [u8; 3],
    /// Blend weight of the occluder color.
    pub opacity: f64,
}

impl Occluder {
    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        self.discs
            .iter()
            .any(|&(cx, cy, r)| (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HardCase {
    /// The object casts a darkened copy of its silhouette, offset by [`LIGHT_VECTOR`].
    Shadow,
    Occlusion(Occluder),
    /// The object is below [`SMALL_TARGET_DIAMETER`].
    SmallTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeOp {
    pub kind: ChangeKind,
    pub hard: Option<HardCase>,
}

/// Global gain and per-channel offset applied to the second image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeasonalShift {
    pub gain: f64,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorNoise {
    pub std: f64,
    pub seed: u64,
}

/// Everything needed to render one labeled pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background_seed: u64,
    /// Earth tones blended by the background texture.
    pub palette: [[u8; 3]; 2],
    /// Objects of the first date.
    pub objects: Vec<Object>,
    pub changes: Vec<ChangeOp>,
    pub seasonal: Option<SeasonalShift>,
    pub noise: Option<SensorNoise>,
}

impl SceneSpec {
    /// Checks geometry and references.
    pub fn validate(&self) -> Result<()> {
        crate::encoder::check_divisible(self.height, self.width)?;
        let (w, h) = (self.width, self.height);
        let outside = |o: &Object| !o.inside_canvas(w, h);
        if let Some(i) = self.objects.iter().position(outside) {
            return Err(Error::Generation(alloc::format!("object {i} lies outside the canvas")));
        }
        let mut used = vec![false; self.objects.len()];
        for (k, op) in self.changes.iter().enumerate() {
            match op.kind {
                ChangeKind::Add(o) => {
                    if outside(&o) {
                        return Err(Error::Generation(alloc::format!(
                            "change {k} adds an object outside the canvas"
                        )));
                    }
                }
                ChangeKind::Remove(index) | ChangeKind::Move { index, .. } => {
                    let Some(slot) = used.get_mut(index) else {
                        return Err(Error::Generation(alloc::format!(
                            "change {k} references missing object {index}"
                        )));
                    };
                    if core::mem::replace(slot, true) {
                        return Err(Error::Generation(alloc::format!(
                            "object {index} changed more than once"
                        )));
                    }
                    if let ChangeKind::Move { dx, dy, .. } = op.kind {
                        if outside(&self.objects[index].moved(dx, dy)) {
                            return Err(Error::Generation(alloc::format!(
                                "change {k} moves object {index} outside the canvas"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Objects visible at the first (`false`) or second (`true`) date, in
    /// drawing order.
    pub fn objects_at(&self, second: bool) -> Vec<Object> {
        if !second {
            return self.objects.clone();
        }
        let mut present: Vec<Option<Object>> = self.objects.iter().copied().map(Some).collect();
        let mut added = Vec::new();
        for op in &self.changes {
            match op.kind {
                ChangeKind::Add(o) => added.push(o),
                ChangeKind::Remove(i) => present[i] = None,
                ChangeKind::Move { index, dx, dy } => {
                    present[index] = Some(self.objects[index].moved(dx, dy));
                }
            }
        }
        present.into_iter().flatten().chain(added).collect()
    }

    /// `(first date, second date)` silhouettes of a change.
    pub fn change_silhouettes(&self, op: &ChangeOp) -> (Option<Object>, Option<Object>) {
        match op.kind {
            ChangeKind::Add(o) => (None, Some(o)),
            ChangeKind::Remove(i) => (Some(self.objects[i]), None),
            ChangeKind::Move { index, dx, dy } => {
                let o = self.objects[index];
                (Some(o), Some(o.moved(dx, dy)))
            }
        }
    }
}

const EARTH_TONES: [[u8; 3]; 5] = [
    [112, 101, 72],
    [92, 110, 62],
    [138, 122, 92],
    [78, 92, 60],
    [150, 138, 110],
];

const ROOF_COLORS: [[u8; 3]; 6] = [
    [205, 205, 210],
    [182, 64, 52],
    [62, 92, 164],
    [232, 222, 198],
    [96, 96, 108],
    [215, 150, 60],
];

fn jitter<R: Rng>(rng: &mut R, base: [u8; 3], amount: i32) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8)
}

fn random_object<R: Rng>(rng: &mut R, w: usize, h: usize, half: (f64, f64)) -> Object {
    let shape = if rng.random_bool(0.6) {
        Shape::Rect
    } else {
        Shape::Ellipse
    };
    let half_w = rng.random_range(half.0..=half.1);
    let half_h = (half_w * rng.random_range(0.6..=1.4)).clamp(half.0, half.1);
    let cx = rng.random_range(half_w..=w as f64 - half_w);
    let cy = rng.random_range(half_h..=h as f64 - half_h);
    let roof = ROOF_COLORS[rng.random_range(0..ROOF_COLORS.len())];
    let fill = jitter(rng, roof, 18);
    Object {
        shape,
        cx,
        cy,
        half_w,
        half_h,
        fill,
    }
}

/// Displacement keeping `o` on the canvas and moving it by at least its size.
fn random_move<R: Rng>(rng: &mut R, o: &Object, w: usize, h: usize) -> (f64, f64) {
    for _ in 0..32 {
        let cx = rng.random_range(o.half_w..=w as f64 - o.half_w);
        let cy = rng.random_range(o.half_h..=h as f64 - o.half_h);
        let (dx, dy) = (cx - o.cx, cy - o.cy);
        if dx.abs() > o.half_w || dy.abs() > o.half_h {
            return (dx, dy);
        }
    }
    // far corner is always a valid destination
    let cx = if o.cx < w as f64 / 2.0 { w as f64 - o.half_w } else { o.half_w };
    let cy = if o.cy < h as f64 / 2.0 { h as f64 - o.half_h } else { o.half_h };
    (cx - o.cx, cy - o.cy)
}

/// Discs covering roughly `coverage` of the object's pixels.
fn random_occluder<R: Rng>(rng: &mut R, o: &Object, w: usize, h: usize) -> Occluder {
    let coverage = rng.random_range(0.2..=0.6);
    let anchors: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                o.cx + rng.random_range(-0.6..=0.6) * o.half_w,
                o.cy + rng.random_range(-0.6..=0.6) * o.half_h,
                rng.random_range(0.6..=1.0),
            )
        })
        .collect();
    let total = o.pixels(w, h).count().max(1) as f64;
    let blob = |scale: f64| Occluder {
        discs: anchors.iter().map(|&(x, y, f)| (x, y, f * scale)).collect(),
        color: [0, 0, 0],
        opacity: 0.0,
    };
    let covered = |scale: f64| {
        let b = blob(scale);
        o.pixels(w, h).filter(|&(x, y)| b.contains(x, y)).count() as f64 / total
    };
    let (mut lo, mut hi) = (0.0, 2.0 * o.half_w.max(o.half_h));
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        if covered(mid) < coverage {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut occ = blob(hi);
    occ.color = [
        rng.random_range(34..=60),
        rng.random_range(74..=104),
        rng.random_range(28..=48),
    ];
    occ.opacity = 0.75;
    occ
}

/// One scene attempt; the caller checks the changed fraction.
pub(super) fn sample_scene<R: Rng>(rng: &mut R, params: &SynthParams) -> SceneSpec {
    let (w, h) = (params.width, params.height);
    let a = EARTH_TONES[rng.random_range(0..EARTH_TONES.len())];
    let b = EARTH_TONES[rng.random_range(0..EARTH_TONES.len())];
    let palette = [jitter(rng, a, 10), jitter(rng, b, 10)];
    let background_seed = rng.next_u64();

    let n_objects = rng.random_range(params.persistent_objects.0..=params.persistent_objects.1);
    let objects: Vec<Object> = (0..n_objects)
        .map(|_| random_object(rng, w, h, params.object_half_size))
        .collect();

    let canvas = (w * h) as f64;
    let target = rng.random_range(params.change_fraction.0..=params.change_fraction.1) * canvas;
    let mut unused: Vec<usize> = (0..objects.len()).collect();
    let mut changes = Vec::new();
    let mut estimate = 0.0;
    while estimate < target {
        let hard = rng.random_bool(params.hard_case_rate.clamp(0.0, 1.0));
        let hard_kind = rng.random_range(0..3u8);
        if hard && hard_kind == 2 {
            // cluster of small targets with about the area of one regular object
            let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let budget = random_object(rng, w, h, params.object_half_size).area();
            let mut area = 0.0;
            while area < budget {
                let r = rng.random_range(2.0..=5.0);
                let mut o = random_object(rng, w, h, (r, r));
                o.cx = (cx + rng.random_range(-28.0..=28.0)).clamp(o.half_w, w as f64 - o.half_w);
                o.cy = (cy + rng.random_range(-28.0..=28.0)).clamp(o.half_h, h as f64 - o.half_h);
                debug_assert!(o.diameter() < SMALL_TARGET_DIAMETER);
                area += o.area();
                changes.push(ChangeOp {
                    kind: ChangeKind::Add(o),
                    hard: Some(HardCase::SmallTarget),
                });
            }
            estimate += area;
            continue;
        }
        let roll = rng.random_range(0.0..1.0);
        let kind = if unused.is_empty() || roll < 0.5 {
            ChangeKind::Add(random_object(rng, w, h, params.object_half_size))
        } else {
            let index = unused.swap_remove(rng.random_range(0..unused.len()));
            if roll < 0.75 {
                ChangeKind::Remove(index)
            } else {
                let (dx, dy) = random_move(rng, &objects[index], w, h);
                ChangeKind::Move { index, dx, dy }
            }
        };
        let subject = match kind {
            ChangeKind::Add(o) => o,
            ChangeKind::Remove(i) => objects[i],
            ChangeKind::Move { index, dx, dy } => objects[index].moved(dx, dy),
        };
        estimate += match kind {
            ChangeKind::Move { .. } => 2.0 * subject.area(),
            _ => subject.area(),
        };
        let hard = hard.then(|| match hard_kind {
            0 => HardCase::Shadow,
            _ => HardCase::Occlusion(random_occluder(rng, &subject, w, h)),
        });
        changes.push(ChangeOp { kind, hard });
    }

    let seasonal = rng.random_bool(params.seasonal_rate.clamp(0.0, 1.0)).then(|| SeasonalShift {
        gain: rng.random_range(0.8..=1.2),
        offset: [
            rng.random_range(-20.0..=20.0),
            rng.random_range(-20.0..=20.0),
            rng.random_range(-20.0..=20.0),
        ],
    });
    let noise = (params.noise_std > 0.0).then(|| SensorNoise {
        std: params.noise_std,
        seed: rng.next_u64(),
    });
    SceneSpec {
        width: w,
        height: h,
        background_seed,
        palette,
        objects,
        changes,
        seasonal,
        noise,
    }
}
