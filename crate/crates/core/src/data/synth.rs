//! Procedural stand-in dataset with a controllable train/evaluation domain gap.
//!
//! Each class pairs a pattern family (stripes, checks, rings, blobs, ...) with
//! a characteristic hue. Every image re-draws frequency, phase, orientation,
//! position and palette, so classes vary internally. Validation and test
//! images additionally pass through a [`DomainShift`] (hue rotation,
//! brightness bias, sensor noise) at generation time.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Pattern families, assigned to classes round-robin.
pub const PATTERNS: [&str; 10] = [
    "horizontal-stripes",
    "vertical-stripes",
    "diagonal-stripes",
    "checkerboard",
    "rings",
    "blob",
    "dot-grid",
    "linear-gradient",
    "radial-gradient",
    "cross",
];

/// Sensor noise present in every split, in 8-bit units.
const BASE_NOISE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    /// Hue rotation in degrees.
    pub hue_shift: f64,
    /// Additive brightness as a fraction of full scale.
    pub brightness_bias: f64,
    /// Extra Gaussian noise, 8-bit units.
    pub noise_sigma: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        Self { hue_shift: 0.0, brightness_bias: 0.0, noise_sigma: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.hue_shift == 0.0 && self.brightness_bias == 0.0 && self.noise_sigma == 0.0
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self { hue_shift: 20.0, brightness_bias: -0.12, noise_sigma: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_side: usize,
    pub domain_shift: DomainShift,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 100,
            val_per_class: 20,
            test_per_class: 20,
            image_side: 64,
            domain_shift: DomainShift::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.image_side < 8 {
            return Err(Error::Config(format!("image_side must be >= 8, got {}", self.image_side)));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be positive".into()));
        }
        let s = &self.domain_shift;
        if !(s.noise_sigma >= 0.0 && s.brightness_bias.abs() <= 1.0 && s.hue_shift.is_finite()) {
            return Err(Error::Config(format!("invalid domain shift {s:?}")));
        }
        Ok(())
    }
}

/// Where [`generate_synthetic`] put things.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub root: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    /// Ground truth for the unlabeled validation split; diagnostics only.
    pub val_labels: PathBuf,
    pub counts: [usize; 3],
}

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.csv", split.as_str()))
}

pub fn val_labels_path(root: &Path) -> PathBuf {
    root.join("val_labels.csv")
}

/// Render one example. Deterministic in `(spec.seed, split, index)`.
pub fn render_example(spec: &SynthSpec, split: Split, index: usize) -> (Image, usize) {
    let class = index % spec.num_classes;
    let split_id = Split::ALL.iter().position(|&s| s == split).unwrap() as u64;
    let mut rng = keyed_rng("synth", &[spec.seed, split_id, index as u64]);
    let side = spec.image_side;
    let mut rgb = render_class(class, spec.num_classes, side, &mut rng);

    let base = Normal::new(0.0, BASE_NOISE / 255.0).expect("finite sigma");
    let shifted = split != Split::Train && !spec.domain_shift.is_identity();
    let shift = &spec.domain_shift;
    let extra = Normal::new(0.0, shift.noise_sigma.max(0.0) / 255.0).expect("finite sigma");
    let mut pixels = Vec::with_capacity(side * side * 3);
    for px in rgb.iter_mut() {
        let mut p = *px;
        if shifted {
            p = rotate_hue(p, shift.hue_shift);
            for c in p.iter_mut() {
                *c += shift.brightness_bias;
            }
        }
        for c in p.iter_mut() {
            *c += base.sample(&mut rng);
            if shifted && shift.noise_sigma > 0.0 {
                *c += extra.sample(&mut rng);
            }
            pixels.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    (Image::new(side, side, pixels).expect("sized buffer"), class)
}

fn render_class(class: usize, num_classes: usize, side: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let hue = 360.0 * class as f64 / num_classes as f64 + rng.gen_range(-12.0..12.0);
    let sat = rng.gen_range(0.55..0.9);
    let fg = hsv_to_rgb(hue, sat, rng.gen_range(0.7..0.95));
    let bg = hsv_to_rgb(hue + 25.0, sat * 0.6, rng.gen_range(0.15..0.4));

    let freq = rng.gen_range(2.5..5.5);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (cx, cy) = (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
    let angle = rng.gen_range(0.0..2.0 * PI);
    let diag_sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let radius = rng.gen_range(0.15..0.3);
    let bar = rng.gen_range(0.06..0.12);
    let tilt = rng.gen_range(-0.15..0.15);

    let pattern = class % PATTERNS.len();
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5) / side as f64;
            let v = (y as f64 + 0.5) / side as f64;
            let (du, dv) = (u - cx, v - cy);
            let r = (du * du + dv * dv).sqrt();
            let mask = match pattern {
                0 => wave(freq * (v + tilt * u), phase),
                1 => wave(freq * (u + tilt * v), phase),
                2 => wave(freq * (u + diag_sign * v) / 2f64.sqrt() * 1.4, phase),
                3 => {
                    let s = (2.0 * PI * freq * 0.5 * u + phase).sin() * (2.0 * PI * freq * 0.5 * v + phase).sin();
                    smoothstep(-0.15, 0.15, s)
                }
                4 => wave(freq * 1.5 * r, phase),
                5 => 1.0 - smoothstep(radius * 0.8, radius * 1.2, r),
                6 => {
                    let g = freq.round().max(3.0);
                    let fu = (u * g + phase / (2.0 * PI)).fract() - 0.5;
                    let fv = (v * g + phase / (2.0 * PI)).fract() - 0.5;
                    1.0 - smoothstep(0.18, 0.28, (fu * fu + fv * fv).sqrt())
                }
                7 => (0.5 + (du * angle.cos() + dv * angle.sin()) * 1.2).clamp(0.0, 1.0),
                8 => (1.0 - r / 0.6).clamp(0.0, 1.0),
                _ => {
                    let near = du.abs().min(dv.abs());
                    1.0 - smoothstep(bar * 0.7, bar * 1.3, near)
                }
            };
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = bg[c] * (1.0 - mask) + fg[c] * mask;
            }
            out.push(px);
        }
    }
    out
}

fn wave(t: f64, phase: f64) -> f64 {
    0.5 + 0.5 * (2.0 * PI * t + phase).sin()
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// `h` in degrees, `s` and `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn rgb_to_hsv(p: [f64; 3]) -> (f64, f64, f64) {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == p[0] {
        60.0 * ((p[1] - p[2]) / d).rem_euclid(6.0)
    } else if max == p[1] {
        60.0 * ((p[2] - p[0]) / d + 2.0)
    } else {
        60.0 * ((p[0] - p[1]) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn rotate_hue(p: [f64; 3], degrees: f64) -> [f64; 3] {
    if degrees == 0.0 {
        return p;
    }
    let (h, s, v) = rgb_to_hsv(p);
    hsv_to_rgb(h + degrees, s, v)
}

/// Write every split as PPM files plus `train.csv`, `val.csv` (unlabeled),
/// `test.csv` and `val_labels.csv` under `root`.
pub fn generate_synthetic(spec: &SynthSpec, root: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut counts = [0usize; 3];
    let mut val_truth = None;
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let dir = root.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let total = spec.per_class(split) * spec.num_classes;
        let mut entries = Vec::with_capacity(total);
        let mut truth = Vec::with_capacity(total);
        for i in 0..total {
            let (img, class) = render_example(spec, split, i);
            let name = match split {
                Split::Val => format!("{i:05}.ppm"),
                _ => format!("{i:05}_c{class:02}.ppm"),
            };
            let rel = PathBuf::from(split.as_str()).join(name);
            img.write_ppm(&root.join(&rel))?;
            let label = if split == Split::Val { None } else { Some(class) };
            entries.push(ManifestEntry { path: rel.clone(), label });
            truth.push(ManifestEntry { path: rel, label: Some(class) });
        }
        counts[si] = total;
        let manifest = DatasetManifest { root: root.to_path_buf(), split, entries };
        manifest.write(&manifest_path(root, split))?;
        if split == Split::Val {
            val_truth = Some(DatasetManifest { root: root.to_path_buf(), split, entries: truth });
        }
    }
    let val_labels = val_labels_path(root);
    val_truth.expect("val split generated").write(&val_labels)?;
    Ok(SynthOutput {
        root: root.to_path_buf(),
        train: manifest_path(root, Split::Train),
        val: manifest_path(root, Split::Val),
        test: manifest_path(root, Split::Test),
        val_labels,
        counts,
    })
}
