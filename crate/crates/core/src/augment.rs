//! Weak/strong augmentation policy.
//!
//! A uniform draw `p` picks the branch: `p < flip_threshold` mirrors the image,
//! `p > strong_threshold` applies RandAug, anything in between passes the
//! image through untouched.
//!
//! RandAug magnitudes map linearly from `m ∈ [0, 10]`:
//!
//! | op           | parameter                          | degenerate image     |
//! |--------------|------------------------------------|----------------------|
//! | AutoContrast | none                               | n/a                  |
//! | Brightness   | factor `1 ± 0.9·m/10`              | black                |
//! | Color        | factor `1 ± 0.9·m/10`              | per-pixel grayscale  |
//! | Contrast     | factor `1 ± 0.9·m/10`              | channel-mean image   |
//! | Rotate       | angle `±30°·m/10`                  | n/a                  |
//!
//! Factors are clamped to `[0.1, 1.9]` and angles to `±30°` before use.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};

pub const FACTOR_RANGE: (f64, f64) = (0.1, 1.9);
pub const MAX_ROTATION_DEG: f64 = 30.0;
pub const MAX_MAGNITUDE: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugOp {
    AutoContrast,
    Brightness,
    Color,
    Contrast,
    Rotate,
}

impl AugOp {
    pub const ALL: [AugOp; 5] = [AugOp::AutoContrast, AugOp::Brightness, AugOp::Color, AugOp::Contrast, AugOp::Rotate];

    pub fn as_str(self) -> &'static str {
        match self {
            AugOp::AutoContrast => "autocontrast",
            AugOp::Brightness => "brightness",
            AugOp::Color => "color",
            AugOp::Contrast => "contrast",
            AugOp::Rotate => "rotate",
        }
    }
}

impl fmt::Display for AugOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AugOp::ALL
            .into_iter()
            .find(|op| op.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown augmentation op `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugPolicy {
    pub flip_threshold: f64,
    pub strong_threshold: f64,
    pub n: usize,
    pub m: u32,
    pub op_set: Vec<AugOp>,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self { flip_threshold: 0.3, strong_threshold: 0.7, n: 2, m: 5, op_set: AugOp::ALL.to_vec() }
    }
}

impl AugPolicy {
    pub fn validate(&self) -> Result<()> {
        let ordered = 0.0 <= self.flip_threshold
            && self.flip_threshold <= self.strong_threshold
            && self.strong_threshold <= 1.0;
        if !ordered {
            return Err(Error::Config(format!(
                "need 0 <= flip_threshold ({}) <= strong_threshold ({}) <= 1",
                self.flip_threshold, self.strong_threshold
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("augment n must be >= 1".into()));
        }
        if self.m > MAX_MAGNITUDE {
            return Err(Error::Config(format!("augment m must be in 0..=10, got {}", self.m)));
        }
        if self.op_set.is_empty() {
            return Err(Error::Config("augment op_set is empty".into()));
        }
        Ok(())
    }
}

/// One RandAug op with its sampled parameter (factor, or angle in degrees).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledOp {
    pub op: AugOp,
    pub param: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Branch {
    Flip,
    Identity,
    RandAug(Vec<SampledOp>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugDecision {
    pub p: f64,
    pub branch: Branch,
}

pub fn decide(policy: &AugPolicy, rng: &mut impl Rng) -> AugDecision {
    let p: f64 = rng.gen();
    decide_at(policy, p, rng)
}

/// Branch for a given draw `p`; `rng` is only consulted for RandAug ops.
pub fn decide_at(policy: &AugPolicy, p: f64, rng: &mut impl Rng) -> AugDecision {
    let branch = if p < policy.flip_threshold {
        Branch::Flip
    } else if p > policy.strong_threshold {
        Branch::RandAug(sample_ops(&policy.op_set, policy.n, policy.m, rng))
    } else {
        Branch::Identity
    };
    AugDecision { p, branch }
}

/// Draw `n` ops with replacement and their signed, clamped parameters.
pub fn sample_ops(op_set: &[AugOp], n: usize, m: u32, rng: &mut impl Rng) -> Vec<SampledOp> {
    let level = m.min(MAX_MAGNITUDE) as f64 / MAX_MAGNITUDE as f64;
    (0..n)
        .map(|_| {
            let op = op_set[rng.gen_range(0..op_set.len())];
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let param = match op {
                AugOp::AutoContrast => 0.0,
                AugOp::Rotate => (sign * level * MAX_ROTATION_DEG).clamp(-MAX_ROTATION_DEG, MAX_ROTATION_DEG),
                _ => (1.0 + sign * level * 0.9).clamp(FACTOR_RANGE.0, FACTOR_RANGE.1),
            };
            SampledOp { op, param }
        })
        .collect()
}

pub fn apply(img: &Image, decision: &AugDecision) -> Image {
    match &decision.branch {
        Branch::Identity => img.clone(),
        Branch::Flip => flip_horizontal(img),
        Branch::RandAug(ops) => ops.iter().fold(img.clone(), |acc, op| apply_op(&acc, op)),
    }
}

pub fn rand_aug(img: &Image, n: usize, m: u32, rng: &mut impl Rng) -> Image {
    sample_ops(&AugOp::ALL, n, m, rng).iter().fold(img.clone(), |acc, op| apply_op(&acc, op))
}

pub fn apply_op(img: &Image, op: &SampledOp) -> Image {
    match op.op {
        AugOp::AutoContrast => autocontrast(img),
        AugOp::Brightness => brightness(img, op.param),
        AugOp::Color => color(img, op.param),
        AugOp::Contrast => contrast(img, op.param),
        AugOp::Rotate => rotate(img, op.param),
    }
}

pub fn flip_horizontal(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(w - 1 - x, y));
        }
    }
    out
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `degenerate + factor · (img − degenerate)`, per channel value.
fn blend_with(img: &Image, factor: f64, degenerate: impl Fn(usize, [u8; 3]) -> [f64; 3]) -> Image {
    let mut out = img.clone();
    for (i, px) in out.pixels_mut().chunks_exact_mut(3).enumerate() {
        let d = degenerate(i, [px[0], px[1], px[2]]);
        for c in 0..3 {
            px[c] = to_u8(d[c] + factor * (px[c] as f64 - d[c]));
        }
    }
    out
}

pub fn brightness(img: &Image, factor: f64) -> Image {
    blend_with(img, factor, |_, _| [0.0; 3])
}

fn luma(px: [u8; 3]) -> f64 {
    0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64
}

pub fn color(img: &Image, factor: f64) -> Image {
    blend_with(img, factor, |_, px| [luma(px); 3])
}

pub fn contrast(img: &Image, factor: f64) -> Image {
    let mean = img.channel_means();
    blend_with(img, factor, |_, _| mean)
}

/// Stretch each channel's `[min, max]` to `[0, 255]`; flat channels are left alone.
pub fn autocontrast(img: &Image) -> Image {
    let mut lo = [255u8; 3];
    let mut hi = [0u8; 3];
    for px in img.pixels().chunks_exact(3) {
        for c in 0..3 {
            lo[c] = lo[c].min(px[c]);
            hi[c] = hi[c].max(px[c]);
        }
    }
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            if hi[c] > lo[c] {
                let scale = 255.0 / (hi[c] - lo[c]) as f64;
                px[c] = to_u8((px[c] - lo[c]) as f64 * scale);
            }
        }
    }
    out
}

/// Rotate about the image centre (counter-clockwise for positive angles),
/// nearest-neighbour sampling, exposed area filled with the channel means.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let mean = img.channel_means();
    let fill = [to_u8(mean[0]), to_u8(mean[1]), to_u8(mean[2])];
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = Image::filled(w, h, fill);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse map: rotate the destination offset by -angle
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (ix, iy) = (sx.round(), sy.round());
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < w && (iy as usize) < h {
                out.set(x, y, img.get(ix as usize, iy as usize));
            }
        }
    }
    out
}
