//! Confidence-thresholded pseudo-labeling of unlabeled, domain-shifted data.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{preprocess, CropMode, DatasetManifest, Image};
use crate::error::{Error, Result};
use crate::models::{stack, Model};

/// Tolerance on `sum(probs) == 1` accepted by [`confidence`] and [`pseudo_label`].
pub const SIMPLEX_TOL: f32 = 1e-5;
const SCORE_BATCH: usize = 64;

fn check_simplex(probs: &[f32]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty probability vector".into()));
    }
    if let Some(bad) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument(format!("probability {bad} is not a non-negative number")));
    }
    let sum: f64 = probs.iter().map(|&p| p as f64).sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL as f64 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

fn argmax_lowest(probs: &[f32]) -> (usize, f32) {
    let mut best = (0, probs[0]);
    for (c, &p) in probs.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (c, p);
        }
    }
    best
}

/// Largest class probability.
pub fn confidence(probs: &[f32]) -> Result<f32> {
    check_simplex(probs)?;
    Ok(argmax_lowest(probs).1)
}

pub fn validate_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside [0, 1]")));
    }
    Ok(())
}

/// `Some((argmax, confidence))` when the confidence meets or exceeds `tau`,
/// `None` (discarded) otherwise. The comparison is made in 32-bit precision;
/// ties in the argmax go to the lowest class index.
pub fn pseudo_label(probs: &[f32], tau: f64) -> Result<Option<(usize, f32)>> {
    validate_tau(tau)?;
    check_simplex(probs)?;
    let (class, conf) = argmax_lowest(probs);
    Ok((conf >= tau as f32).then_some((class, conf)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurationReport {
    pub total: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub per_class: Vec<usize>,
    pub tau: f64,
}

impl CurationReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "key,value\ntau,{}\ntotal,{}\naccepted,{}\nacceptance_rate,{}\n",
            self.tau, self.total, self.accepted, self.acceptance_rate
        );
        for (c, n) in self.per_class.iter().enumerate() {
            out.push_str(&format!("class_{c},{n}\n"));
        }
        out
    }
}

impl fmt::Display for CurationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tau={} accepted {}/{} ({:.1}%) per-class {:?}",
            self.tau,
            self.accepted,
            self.total,
            100.0 * self.acceptance_rate,
            self.per_class
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Original,
    Pseudo,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Pseudo => "pseudo",
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "original" => Ok(Provenance::Original),
            "pseudo" => Ok(Provenance::Pseudo),
            other => Err(Error::Data(format!("unknown provenance `{other}`"))),
        }
    }
}

/// One row of a pseudo or merged manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainEntry {
    pub path: PathBuf,
    pub label: usize,
    /// Teacher confidence for pseudo rows; `None` for original labels.
    pub confidence: Option<f32>,
    pub provenance: Provenance,
}

/// `path,label,confidence,provenance` listing with absolute paths.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainManifest {
    pub num_classes: usize,
    pub entries: Vec<TrainEntry>,
}

impl TrainManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.entries.iter().filter(|e| e.provenance == provenance).count()
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.entries.iter().map(|e| e.path.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,label,confidence,provenance\n");
        for e in &self.entries {
            let conf = e.confidence.map(|c| format!("{c:?}")).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.path.display(), e.label, conf, e.provenance.as_str()));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, source: &Path, num_classes: usize) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Manifest { path: source.to_path_buf(), line, msg };
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let row = raw.trim();
            if row.is_empty() || (i == 0 && row == "path,label,confidence,provenance") {
                continue;
            }
            let mut fields = row.rsplitn(4, ',');
            let (Some(prov), Some(conf), Some(label), Some(path)) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(err(i + 1, format!("expected 4 fields, got `{row}`")));
            };
            let label: usize = label.trim().parse().map_err(|_| err(i + 1, format!("bad label `{label}`")))?;
            if label >= num_classes {
                return Err(err(i + 1, format!("label {label} out of range for {num_classes} classes")));
            }
            let confidence = match conf.trim() {
                "" => None,
                c => Some(c.parse::<f32>().map_err(|_| err(i + 1, format!("bad confidence `{c}`")))?),
            };
            let provenance = prov.parse().map_err(|e: Error| err(i + 1, e.to_string()))?;
            entries.push(TrainEntry { path: PathBuf::from(path.trim()), label, confidence, provenance });
        }
        let m = Self { num_classes, entries };
        m.check_unique().map_err(|msg| err(0, msg))?;
        Ok(m)
    }

    pub fn read(path: &Path, num_classes: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, num_classes)
    }

    fn check_unique(&self) -> std::result::Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(format!("duplicate path `{}`", e.path.display()));
            }
        }
        Ok(())
    }

    pub fn load_images(&self) -> Result<Vec<Image>> {
        self.entries.par_iter().map(|e| Image::read_ppm(&e.path)).collect()
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

/// Filter pre-computed predictions; `probs` holds one `k`-wide row per path.
pub fn curate_predictions(
    paths: &[PathBuf],
    probs: &[f32],
    k: usize,
    tau: f64,
) -> Result<(TrainManifest, CurationReport)> {
    validate_tau(tau)?;
    if k == 0 || probs.len() != paths.len() * k {
        return Err(Error::shape("curate", format!("{} paths vs {} values of width {k}", paths.len(), probs.len())));
    }
    let mut per_class = vec![0; k];
    let mut entries = Vec::new();
    for (path, row) in paths.iter().zip(probs.chunks(k)) {
        if let Some((label, confidence)) = pseudo_label(row, tau)? {
            per_class[label] += 1;
            entries.push(TrainEntry { path: path.clone(), label, confidence: Some(confidence), provenance: Provenance::Pseudo });
        }
    }
    let total = paths.len();
    let accepted = entries.len();
    let report = CurationReport {
        total,
        accepted,
        acceptance_rate: if total == 0 { 0.0 } else { accepted as f64 / total as f64 },
        per_class,
        tau,
    };
    Ok((TrainManifest { num_classes: k, entries }, report))
}

/// Center-crop predictions for a list of images: `N * K` values, row-major.
pub fn predict_images(model: &Model, images: &[Image]) -> Result<Vec<f32>> {
    let geom = model.geometry();
    let chunks: Vec<Vec<f32>> = images
        .par_chunks(SCORE_BATCH)
        .map(|chunk| {
            let xs = chunk
                .iter()
                .map(|img| preprocess(img, geom.resize, geom.crop, CropMode::Center))
                .collect::<Result<Vec<_>>>()?;
            Ok(model.predict_probs(stack(&xs)?)?.into_data())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Score every image of `unlabeled` and keep those whose confidence meets `tau`.
pub fn curate(model: &Model, unlabeled: &DatasetManifest, tau: f64) -> Result<(TrainManifest, CurationReport)> {
    validate_tau(tau)?;
    let paths = unlabeled.resolved_paths().iter().map(|p| absolute(p)).collect::<Result<Vec<_>>>()?;
    let images = paths.par_iter().map(|p| Image::read_ppm(p)).collect::<Result<Vec<_>>>()?;
    let probs = predict_images(model, &images)?;
    curate_predictions(&paths, &probs, model.num_classes(), tau)
}

/// Labeled rows first (manifest order), then pseudo rows (curation order).
pub fn merge(labeled: &DatasetManifest, num_classes: usize, pseudo: &TrainManifest) -> Result<TrainManifest> {
    if pseudo.num_classes != num_classes {
        return Err(Error::Data(format!(
            "class spaces differ: labeled set has {num_classes} classes, pseudo set {}",
            pseudo.num_classes
        )));
    }
    let mut entries = Vec::with_capacity(labeled.len() + pseudo.len());
    for e in &labeled.entries {
        let label = e.label.ok_or_else(|| Error::Data(format!("{} is unlabeled", e.path.display())))?;
        if label >= num_classes {
            return Err(Error::Data(format!("label {label} out of range for {num_classes} classes")));
        }
        entries.push(TrainEntry {
            path: absolute(&labeled.resolve(e))?,
            label,
            confidence: None,
            provenance: Provenance::Original,
        });
    }
    entries.extend(pseudo.entries.iter().cloned());
    let merged = TrainManifest { num_classes, entries };
    merged.check_unique().map_err(Error::Data)?;
    Ok(merged)
}

/// A labeled manifest as training rows, all marked original.
pub fn as_train_manifest(labeled: &DatasetManifest, num_classes: usize) -> Result<TrainManifest> {
    merge(labeled, num_classes, &TrainManifest { num_classes, entries: Vec::new() })
}
