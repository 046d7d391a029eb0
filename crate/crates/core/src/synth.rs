//! Procedural articulated-instrument silhouettes with analytic tip ground truth.
//!
//! An instrument is a shaft capsule ending at the wrist, a wrist disk, and two
//! tapered jaws rooted on the wrist rim. Jaw directions are `θ + φ_L` (left)
//! and `θ - φ_R` (right), with `θ` pointing from the shaft toward the wrist.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    self, DatasetError, FrameRecord, PartMask, Point, Split, TipPair, BACKGROUND, GRIPPER, SHAFT,
    WRIST,
};

/// Frames whose larger opening angle is below this count as closed.
pub const CLOSED_OPENING: f64 = 0.05;

/// Tips must stay this far inside the image border.
const TIP_MARGIN: f64 = 2.0;
/// Extra clearance between the wrist disk and the border, so the disk and a
/// piece of shaft behind it are always visible.
const WRIST_MARGIN: f64 = 3.0;
const REJECTION_BUDGET: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("pose sampling exhausted {0} attempts: tips cannot fit in the image")]
    ConfigInfeasible(usize),
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstrumentPose {
    pub wrist: Point,
    pub shaft_angle: f64,
    pub shaft_length: f64,
    pub shaft_width: f64,
    pub wrist_radius: f64,
    pub jaw_length: f64,
    pub jaw_base_width: f64,
    pub jaw_tip_width: f64,
    pub open_left: f64,
    pub open_right: f64,
}

impl InstrumentPose {
    fn jaw_dir(&self, left: bool) -> (f64, f64) {
        let a = if left {
            self.shaft_angle + self.open_left
        } else {
            self.shaft_angle - self.open_right
        };
        (a.cos(), a.sin())
    }

    /// Analytic jaw-centerline endpoints.
    pub fn tips(&self) -> TipPair {
        let end = |left| {
            let (c, s) = self.jaw_dir(left);
            Point::new(self.wrist.x + self.jaw_length * c, self.wrist.y + self.jaw_length * s)
        };
        TipPair::new(end(true), end(false))
    }

    pub fn is_closed(&self) -> bool {
        self.open_left.max(self.open_right) < CLOSED_OPENING
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub min: f64,
    pub max: f64,
}

impl ParamRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..self.max)
        } else {
            self.min
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub shaft_angle: ParamRange,
    pub shaft_length: ParamRange,
    pub shaft_width: ParamRange,
    pub wrist_radius: ParamRange,
    pub jaw_length: ParamRange,
    pub jaw_base_width: ParamRange,
    pub jaw_tip_width: ParamRange,
    /// Range for each of the two opening angles.
    pub opening: ParamRange,
    /// Probability that both openings are drawn below [`CLOSED_OPENING`].
    pub closed_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 160,
            height: 128,
            shaft_angle: ParamRange::new(0.0, 2.0 * PI),
            shaft_length: ParamRange::new(40.0, 100.0),
            shaft_width: ParamRange::new(6.0, 12.0),
            wrist_radius: ParamRange::new(5.0, 8.0),
            jaw_length: ParamRange::new(18.0, 32.0),
            jaw_base_width: ParamRange::new(3.0, 5.0),
            jaw_tip_width: ParamRange::new(2.0, 3.0),
            opening: ParamRange::new(0.0, 0.7),
            closed_fraction: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.width == 0
            || self.height == 0
            || self.width % dataset::DIM_MULTIPLE != 0
            || self.height % dataset::DIM_MULTIPLE != 0
        {
            return bad("image size must be a positive multiple of 16");
        }
        let ranges = [
            ("shaft_angle", self.shaft_angle),
            ("shaft_length", self.shaft_length),
            ("shaft_width", self.shaft_width),
            ("wrist_radius", self.wrist_radius),
            ("jaw_length", self.jaw_length),
            ("jaw_base_width", self.jaw_base_width),
            ("jaw_tip_width", self.jaw_tip_width),
            ("opening", self.opening),
        ];
        for (name, r) in ranges {
            if !(r.min <= r.max) || !r.min.is_finite() || !r.max.is_finite() {
                return bad(&format!("{name}: min must not exceed max"));
            }
        }
        for (name, r) in &ranges[1..7] {
            if r.min <= 0.0 {
                return bad(&format!("{name}: lengths must be positive"));
            }
        }
        if self.opening.min < 0.0 {
            return bad("opening angles must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.closed_fraction) {
            return bad("closed_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    fn closed_range(&self) -> ParamRange {
        ParamRange::new(self.opening.min, self.opening.max.min(CLOSED_OPENING))
    }

    fn open_range(&self) -> ParamRange {
        let lo = self.opening.min.max(CLOSED_OPENING);
        if lo <= self.opening.max {
            ParamRange::new(lo, self.opening.max)
        } else {
            self.opening
        }
    }
}

/// Draws a pose whose wrist disk and both tips fit in the image.
pub fn sample_pose<R: Rng>(rng: &mut R, config: &SynthConfig) -> Result<InstrumentPose, SynthError> {
    config.validate()?;
    let (w, h) = (config.width as f64, config.height as f64);
    for _ in 0..REJECTION_BUDGET {
        let closed = rng.gen_bool(config.closed_fraction);
        let opening = if closed { config.closed_range() } else { config.open_range() };
        let wrist_radius = config.wrist_radius.sample(rng);
        let margin = wrist_radius + WRIST_MARGIN;
        if 2.0 * margin >= w - 1.0 || 2.0 * margin >= h - 1.0 {
            continue;
        }
        let wrist = Point::new(
            rng.gen_range(margin..w - 1.0 - margin),
            rng.gen_range(margin..h - 1.0 - margin),
        );
        let jaw_base_width = config.jaw_base_width.sample(rng);
        let pose = InstrumentPose {
            wrist,
            shaft_angle: config.shaft_angle.sample(rng),
            shaft_length: config.shaft_length.sample(rng),
            shaft_width: config.shaft_width.sample(rng),
            wrist_radius,
            jaw_length: config.jaw_length.sample(rng),
            jaw_base_width,
            jaw_tip_width: config.jaw_tip_width.sample(rng).min(jaw_base_width),
            open_left: opening.sample(rng),
            open_right: opening.sample(rng),
        };
        let tips = pose.tips();
        let fits = |p: Point| {
            p.x >= TIP_MARGIN && p.y >= TIP_MARGIN && p.x <= w - 1.0 - TIP_MARGIN && p.y <= h - 1.0 - TIP_MARGIN
        };
        if fits(tips.left) && fits(tips.right) {
            return Ok(pose);
        }
    }
    Err(SynthError::ConfigInfeasible(REJECTION_BUDGET))
}

fn cross(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ax * by - ay * bx
}

/// Distance from `p` to the segment `a`–`b`.
fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(Point::new(a.x + t * dx, a.y + t * dy))
}

/// Inclusive point-in-convex-polygon test; vertices in either winding.
fn in_convex(p: Point, poly: &[Point]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let c = cross(b.x - a.x, b.y - a.y, p.x - a.x, p.y - a.y);
        if c.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = c.signum();
        } else if c.signum() != sign {
            return false;
        }
    }
    true
}

/// Integer pixel box covering `[lo, hi]`, clipped to the image.
fn pixel_box(lo: Point, hi: Point, w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
    let x0 = lo.x.floor().max(0.0);
    let y0 = lo.y.floor().max(0.0);
    let x1 = hi.x.ceil().min(w as f64 - 1.0);
    let y1 = hi.y.ceil().min(h as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

fn paint_where(mask: &mut PartMask, lo: Point, hi: Point, label: u8, inside: impl Fn(Point) -> bool) {
    let Some((x0, y0, x1, y1)) = pixel_box(lo, hi, mask.width(), mask.height()) else {
        return;
    };
    for y in y0..=y1 {
        for x in x0..=x1 {
            if inside(Point::new(x as f64, y as f64)) {
                mask.set(x, y, label);
            }
        }
    }
}

fn jaw_quad(pose: &InstrumentPose, left: bool) -> [Point; 4] {
    let (c, s) = pose.jaw_dir(left);
    let (nx, ny) = (-s, c);
    let root = Point::new(pose.wrist.x + pose.wrist_radius * c, pose.wrist.y + pose.wrist_radius * s);
    let tip = Point::new(pose.wrist.x + pose.jaw_length * c, pose.wrist.y + pose.jaw_length * s);
    let (hb, ht) = (pose.jaw_base_width / 2.0, pose.jaw_tip_width / 2.0);
    [
        Point::new(root.x + hb * nx, root.y + hb * ny),
        Point::new(tip.x + ht * nx, tip.y + ht * ny),
        Point::new(tip.x - ht * nx, tip.y - ht * ny),
        Point::new(root.x - hb * nx, root.y - hb * ny),
    ]
}

/// Paints shaft, wrist, then jaws (later parts overwrite earlier ones) and
/// returns the mask with the analytic tips.
pub fn rasterize(pose: &InstrumentPose, width: usize, height: usize) -> Result<(PartMask, TipPair), SynthError> {
    let mut mask = PartMask::background(width, height)?;
    let (c, s) = (pose.shaft_angle.cos(), pose.shaft_angle.sin());

    let back = Point::new(pose.wrist.x - pose.shaft_length * c, pose.wrist.y - pose.shaft_length * s);
    let r = pose.shaft_width / 2.0;
    let lo = Point::new(back.x.min(pose.wrist.x) - r, back.y.min(pose.wrist.y) - r);
    let hi = Point::new(back.x.max(pose.wrist.x) + r, back.y.max(pose.wrist.y) + r);
    paint_where(&mut mask, lo, hi, SHAFT, |p| segment_distance(p, back, pose.wrist) <= r);

    let wr = pose.wrist_radius;
    let lo = Point::new(pose.wrist.x - wr, pose.wrist.y - wr);
    let hi = Point::new(pose.wrist.x + wr, pose.wrist.y + wr);
    paint_where(&mut mask, lo, hi, WRIST, |p| p.dist(pose.wrist) <= wr);

    for left in [true, false] {
        let quad = jaw_quad(pose, left);
        let lo = quad.iter().fold(Point::new(f64::INFINITY, f64::INFINITY), |a, p| {
            Point::new(a.x.min(p.x), a.y.min(p.y))
        });
        let hi = quad.iter().fold(Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| {
            Point::new(a.x.max(p.x), a.y.max(p.y))
        });
        paint_where(&mut mask, lo, hi, GRIPPER, |p| in_convex(p, &quad));
    }
    Ok((mask, pose.tips()))
}

/// Flip/scale parameters of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub scale: f64,
}

impl Augmentation {
    pub const IDENTITY: Self = Self {
        hflip: false,
        vflip: false,
        scale: 1.0,
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            scale: rng.gen_range(0.7..=1.3),
        }
    }

    fn flip(&self, p: Point, w: f64, h: f64) -> Point {
        Point::new(
            if self.hflip { w - 1.0 - p.x } else { p.x },
            if self.vflip { h - 1.0 - p.y } else { p.y },
        )
    }

    /// Forward map: flips, then scale about the image center.
    pub fn map_point(&self, p: Point, width: usize, height: usize) -> Point {
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let f = self.flip(p, w, h);
        Point::new(cx + self.scale * (f.x - cx), cy + self.scale * (f.y - cy))
    }

    /// Applies the transform; `None` when a tip would leave the image.
    pub fn apply(&self, mask: &PartMask, tips: TipPair) -> Option<(PartMask, TipPair)> {
        let (width, height) = (mask.width(), mask.height());
        let mut out = TipPair::new(
            self.map_point(tips.left, width, height),
            self.map_point(tips.right, width, height),
        );
        if !out.in_bounds(width, height) {
            return None;
        }
        // a single mirror reverses chirality, so the tip labels trade places
        if self.hflip != self.vflip {
            out = out.swapped();
        }
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let mut labels = vec![BACKGROUND; width * height];
        for y in 0..height {
            for x in 0..width {
                let unscaled = Point::new(cx + (x as f64 - cx) / self.scale, cy + (y as f64 - cy) / self.scale);
                let src = self.flip(unscaled, w, h);
                let (sx, sy) = (src.x.round(), src.y.round());
                if sx >= 0.0 && sy >= 0.0 && sx < w && sy < h {
                    labels[y * width + x] = mask.get(sx as usize, sy as usize);
                }
            }
        }
        let mask = PartMask::new(width, height, labels).expect("resampling preserves labels and size");
        Some((mask, out))
    }
}

const AUGMENT_ATTEMPTS: usize = 32;

/// Random flip and scale. Draws that push a tip out of the image are
/// redrawn; if every draw fails, only the flips are kept.
pub fn augment<R: Rng>(mask: &PartMask, tips: TipPair, rng: &mut R) -> (PartMask, TipPair) {
    let mut last = Augmentation::IDENTITY;
    for _ in 0..AUGMENT_ATTEMPTS {
        last = Augmentation::sample(rng);
        if let Some(out) = last.apply(mask, tips) {
            return out;
        }
    }
    Augmentation {
        scale: 1.0,
        ..last
    }
    .apply(mask, tips)
    .expect("flips keep in-bounds tips in bounds")
}

/// 64-bit finalizer from SplitMix64.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator stream for frame `index` under `seed`.
pub fn frame_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// 80/10/10 split from a hash of the frame index.
pub fn split_for_index(index: u64) -> Split {
    match splitmix64(index) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

pub fn generate_frame(config: &SynthConfig, index: u64) -> Result<(InstrumentPose, PartMask, TipPair), SynthError> {
    let mut rng = frame_rng(config.seed, index);
    let pose = sample_pose(&mut rng, config)?;
    let (mask, tips) = rasterize(&pose, config.width, config.height)?;
    Ok((pose, mask, tips))
}

/// Writes `n` frames plus `manifest.jsonl` into `out_dir` and returns the
/// manifest path. Output bytes depend only on `(config, n)`.
pub fn generate_dataset(n: usize, config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf, SynthError> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let mask_dir = out_dir.join("masks");
    fs::create_dir_all(&mask_dir).map_err(|source| DatasetError::Io {
        path: mask_dir.clone(),
        source,
    })?;

    let records = (0..n)
        .into_par_iter()
        .map(|i| -> Result<FrameRecord, SynthError> {
            let (pose, mask, tips) = generate_frame(config, i as u64)?;
            let id = format!("frame_{i:06}");
            let rel = PathBuf::from("masks").join(format!("{id}.pgm"));
            dataset::write_mask(&mask, out_dir.join(&rel))?;
            Ok(FrameRecord {
                id,
                mask: rel,
                tips,
                pose: Some(pose),
                split: split_for_index(i as u64),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let manifest = out_dir.join(dataset::MANIFEST_NAME);
    dataset::write_manifest(&records, &manifest)?;
    Ok(manifest)
}
