//! Images, manifests, preprocessing, and the synthetic dataset generator.

mod image;
pub mod manifest;
pub mod preprocess;
pub mod synth;

use std::path::Path;

use rayon::prelude::*;

pub use image::{probe_ppm, Image};
pub use manifest::{load_manifest, load_manifest_as, DatasetManifest, ManifestEntry, Split, UNLABELED};
pub use preprocess::{crop, normalize, preprocess, resize_bilinear, CropMode, Geometry, SampleKey};
pub use synth::{generate_synthetic, DomainShift, SynthOutput, SynthSpec};

use crate::error::Result;

/// A labeled image held in memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
}

/// Read every image a manifest references, in manifest order.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<Image>> {
    manifest
        .resolved_paths()
        .par_iter()
        .map(|p| Image::read_ppm(p))
        .collect()
}

/// Read a manifest's images, paired with labels; unlabeled entries are an error.
pub fn load_labeled(manifest: &DatasetManifest) -> Result<Vec<LabeledExample>> {
    let images = load_images(manifest)?;
    manifest
        .entries
        .iter()
        .zip(images)
        .map(|(e, image)| match e.label {
            Some(label) => Ok(LabeledExample { image, label }),
            None => Err(crate::Error::Data(format!("{} is unlabeled", e.path.display()))),
        })
        .collect()
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| crate::Error::io(path, e))
}
