use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::rng::keyed_rng;

/// Identifies one example in one epoch of one run; keys per-example randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleKey {
    pub seed: u64,
    pub epoch: u64,
    pub index: u64,
}

impl SampleKey {
    pub fn rng(&self, domain: &str) -> crate::rng::KeyedRng {
        keyed_rng(domain, &[self.seed, self.epoch, self.index])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Center,
    Random(SampleKey),
}

/// Bilinear resize to `side x side` using pixel-center alignment.
pub fn resize_bilinear(img: &Image, side: usize) -> Image {
    if img.width() == side && img.height() == side {
        return img.clone();
    }
    let sx = img.width() as f32 / side as f32;
    let sy = img.height() as f32 / side as f32;
    let axis = |dst: usize, scale: f32, extent: usize| {
        let src = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(extent - 1);
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, src - i0 as f32)
    };
    let mut out = Image::filled(side, side, [0, 0, 0]);
    for y in 0..side {
        let (y0, y1, fy) = axis(y, sy, img.height());
        for x in 0..side {
            let (x0, x1, fx) = axis(x, sx, img.width());
            let (p00, p01, p10, p11) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f32 * (1.0 - fx) + p01[c] as f32 * fx;
                let bottom = p10[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
                px[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.set(x, y, px);
        }
    }
    out
}

/// Square crop; random offsets are drawn from the sample's own stream.
pub fn crop(img: &Image, side: usize, mode: CropMode) -> Result<Image> {
    if side > img.width() || side > img.height() {
        return Err(Error::InvalidArgument(format!(
            "crop {side} larger than image {}x{}",
            img.width(),
            img.height()
        )));
    }
    let (slack_x, slack_y) = (img.width() - side, img.height() - side);
    let (ox, oy) = match mode {
        CropMode::Center => (slack_x / 2, slack_y / 2),
        CropMode::Random(key) => {
            let mut rng = key.rng("crop");
            (rng.gen_range(0..=slack_x), rng.gen_range(0..=slack_y))
        }
    };
    let mut pixels = Vec::with_capacity(side * side * 3);
    for y in oy..oy + side {
        let start = (y * img.width() + ox) * 3;
        pixels.extend_from_slice(&img.pixels()[start..start + side * 3]);
    }
    Image::new(side, side, pixels)
}

/// Map 8-bit values to `[-1, 1]` via `v / 127.5 - 1`, channel-major `[3, H, W]`.
pub fn normalize_into(img: &Image, out: &mut [f32]) {
    let plane = img.width() * img.height();
    debug_assert_eq!(out.len(), plane * 3);
    for (i, px) in img.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
}

pub fn normalize(img: &Image) -> Tensor {
    let mut data = vec![0.0; img.width() * img.height() * 3];
    normalize_into(img, &mut data);
    Tensor::new(vec![3, img.height(), img.width()], data).expect("shape matches buffer")
}

/// Resize, crop, normalize: `[3, crop_side, crop_side]` in `[-1, 1]`.
pub fn preprocess(img: &Image, resize_side: usize, crop_side: usize, mode: CropMode) -> Result<Tensor> {
    if crop_side > resize_side {
        return Err(Error::InvalidArgument(format!(
            "crop side {crop_side} exceeds resize side {resize_side}"
        )));
    }
    if crop_side == 0 {
        return Err(Error::InvalidArgument("crop side must be positive".into()));
    }
    let resized = resize_bilinear(img, resize_side);
    Ok(normalize(&crop(&resized, crop_side, mode)?))
}

/// Resize and crop geometry of a model's input pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub resize: usize,
    pub crop: usize,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!(
                "crop side {} must be in 1..={}",
                self.crop, self.resize
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_map_endpoints() {
        let img = Image::new(3, 1, vec![0, 0, 0, 255, 255, 255, 128, 128, 128]).unwrap();
        let t = normalize(&img);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
        assert!((t.data()[2] as f64 - (128.0 / 127.5 - 1.0)).abs() < 1e-7);
        assert!((t.data()[2] - 0.003_921_6).abs() < 1e-6);
    }

    #[test]
    fn crop_larger_than_resize_is_rejected() {
        let img = Image::filled(8, 8, [1, 2, 3]);
        assert!(preprocess(&img, 4, 5, CropMode::Center).is_err());
    }

    #[test]
    fn output_has_crop_geometry() {
        let img = Image::filled(64, 48, [10, 20, 30]);
        let t = preprocess(&img, 64, 56, CropMode::Center).unwrap();
        assert_eq!(t.shape(), &[3, 56, 56]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn random_crop_depends_only_on_key() {
        let mut img = Image::filled(16, 16, [0, 0, 0]);
        for y in 0..16 {
            for x in 0..16 {
                img.set(x, y, [(x * 16) as u8, (y * 16) as u8, 7]);
            }
        }
        let k = SampleKey { seed: 3, epoch: 1, index: 9 };
        let a = preprocess(&img, 16, 10, CropMode::Random(k)).unwrap();
        let b = preprocess(&img, 16, 10, CropMode::Random(k)).unwrap();
        assert_eq!(a, b);
        let distinct = (0..20)
            .map(|i| preprocess(&img, 16, 10, CropMode::Random(SampleKey { index: i, ..k })).unwrap())
            .filter(|t| t != &a)
            .count();
        assert!(distinct > 0);
    }

    #[test]
    fn center_crop_is_centered() {
        let mut img = Image::filled(5, 5, [0, 0, 0]);
        img.set(2, 2, [255, 255, 255]);
        let c = crop(&img, 1, CropMode::Center).unwrap();
        assert_eq!(c.get(0, 0), [255, 255, 255]);
    }

    #[test]
    fn resize_of_constant_image_is_constant() {
        let img = Image::filled(64, 64, [9, 99, 199]);
        let r = resize_bilinear(&img, 40);
        assert!(r.pixels().chunks(3).all(|p| p == [9, 99, 199]));
    }
}
