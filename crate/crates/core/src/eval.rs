//! Top-k accuracy, single-image latency, and the accuracy/latency composite score.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{load_images, preprocess, CropMode, DatasetManifest, Image};
use crate::error::{Error, Result};
use crate::models::{stack, Model};
use crate::nncore::Tensor;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    pub top3: f64,
    pub n_examples: usize,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "top1={:.4} top3={:.4} n={}", self.top1, self.top3, self.n_examples)
    }
}

/// Whether `label` ranks among the `k` best entries of `row`; equal
/// probabilities rank the lower class index first.
pub fn in_top_k(row: &[f32], label: usize, k: usize) -> bool {
    let p = row[label];
    let ahead = row.iter().enumerate().filter(|&(c, &q)| q > p || (q == p && c < label)).count();
    ahead < k
}

/// Fraction of rows (width `num_classes`) whose label is within the top `k`.
pub fn topk_accuracy(probs: &[f32], num_classes: usize, labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > num_classes {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={num_classes}")));
    }
    if probs.len() != labels.len() * num_classes {
        return Err(Error::shape("topk_accuracy", format!("{} values for {} labels × {num_classes}", probs.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set is undefined".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {num_classes} classes")));
    }
    let hits = probs.chunks(num_classes).zip(labels).filter(|(row, &y)| in_top_k(row, y, k)).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn metrics_from_probs(probs: &[f32], num_classes: usize, labels: &[usize]) -> Result<Metrics> {
    Ok(Metrics {
        top1: topk_accuracy(probs, num_classes, labels, 1)?,
        top3: topk_accuracy(probs, num_classes, labels, 3.min(num_classes))?,
        n_examples: labels.len(),
    })
}

/// Center-cropped, normalized evaluation inputs prepared once for repeated use.
#[derive(Clone, Debug)]
pub struct EvalSet {
    batches: Vec<Tensor>,
    labels: Vec<usize>,
    side: usize,
}

impl EvalSet {
    pub fn new(images: &[Image], labels: Vec<usize>, resize: usize, crop: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("evaluation set is empty".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!("{} images vs {} labels", images.len(), labels.len())));
        }
        let batches = images
            .par_chunks(EVAL_BATCH)
            .map(|chunk| {
                let xs = chunk
                    .iter()
                    .map(|img| preprocess(img, resize, crop, CropMode::Center))
                    .collect::<Result<Vec<_>>>()?;
                stack(&xs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { batches, labels, side: crop })
    }

    pub fn for_model(model: &Model, images: &[Image], labels: Vec<usize>) -> Result<Self> {
        let g = model.geometry();
        Self::new(images, labels, g.resize, g.crop)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn predict(&self, model: &Model) -> Result<Vec<f32>> {
        let rows: Vec<Vec<f32>> = self
            .batches
            .par_iter()
            .map(|b| Ok(model.predict_probs(b.clone())?.into_data()))
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    }

    pub fn evaluate(&self, model: &Model) -> Result<Metrics> {
        metrics_from_probs(&self.predict(model)?, model.num_classes(), &self.labels)
    }
}

/// Top-1/top-3 of `model` on a labeled manifest, center crop.
pub fn evaluate(model: &Model, manifest: &DatasetManifest) -> Result<Metrics> {
    if manifest.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty manifest".into()));
    }
    let labels = manifest
        .entries
        .iter()
        .map(|e| e.label.ok_or_else(|| Error::Data(format!("{} is unlabeled", e.path.display()))))
        .collect::<Result<Vec<_>>>()?;
    let images = load_images(manifest)?;
    EvalSet::for_model(model, &images, labels)?.evaluate(model)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreInputs {
    pub top1: f64,
    pub top3: f64,
    pub runtime_ms: f64,
    pub c: f64,
}

/// `2 · (top1 + top3) / (C · runtime_ms)`, accuracies as fractions.
pub fn challenge_score(inputs: &ScoreInputs) -> Result<f64> {
    let ScoreInputs { top1, top3, runtime_ms, c } = *inputs;
    if !(runtime_ms > 0.0) || !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("runtime ({runtime_ms}) and C ({c}) must be positive")));
    }
    if !(top1 >= 0.0 && top3 >= 0.0) {
        return Err(Error::InvalidArgument(format!("accuracies must be non-negative, got {top1}, {top3}")));
    }
    Ok(2.0 * (top1 + top3) / (c * runtime_ms))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub iterations: usize,
    pub warmup: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl LatencyReport {
    pub fn from_samples(samples_ms: Vec<f64>, warmup: usize) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::InvalidArgument("no latency samples".into()));
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let (lo, hi) = min_max(&samples_ms);
        Ok(Self { iterations: samples_ms.len(), warmup, mean_ms: mean.clamp(lo, hi), std_ms: var.sqrt(), samples_ms })
    }

    pub fn min_ms(&self) -> f64 {
        min_max(&self.samples_ms).0
    }

    pub fn max_ms(&self) -> f64 {
        min_max(&self.samples_ms).1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,ms\n");
        for (i, s) in self.samples_ms.iter().enumerate() {
            out.push_str(&format!("{i},{s}\n"));
        }
        out
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} iterations ({} warmup discarded): mean {:.4} ms, std {:.4} ms, min {:.4} ms, max {:.4} ms",
            self.iterations,
            self.warmup,
            self.mean_ms,
            self.std_ms,
            self.min_ms(),
            self.max_ms()
        )
    }
}

/// Wall-clock time of single-image forward passes on the calling thread.
pub fn measure_latency(model: &Model, iterations: usize, warmup: usize) -> Result<LatencyReport> {
    if iterations < 1 {
        return Err(Error::InvalidArgument("latency needs at least one iteration".into()));
    }
    let side = model.config().input_side;
    let input = Tensor::filled(&[1, 3, side, side], 0.0);
    for _ in 0..warmup {
        model.predict_probs(input.clone())?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let x = input.clone();
        let t = Instant::now();
        let p = model.predict_probs(x)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(p);
    }
    LatencyReport::from_samples(samples, warmup)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        let row = [0.5, 0.3, 0.2];
        assert_eq!(topk_accuracy(&row, 3, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&row, 3, &[1], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&row, 3, &[2], 3).unwrap(), 1.0);
        assert!(topk_accuracy(&row, 3, &[1], 4).is_err());
        assert!(topk_accuracy(&[], 3, &[], 1).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let row = [0.4, 0.4, 0.2];
        assert!(in_top_k(&row, 0, 1));
        assert!(!in_top_k(&row, 1, 1));
        assert!(in_top_k(&row, 1, 2));
    }

    #[test]
    fn score_examples() {
        let s = challenge_score(&ScoreInputs { top1: 0.94, top3: 0.9917, runtime_ms: 1.61, c: 1.0 }).unwrap();
        assert!((s - 2.0 * 1.9317 / 1.61).abs() < 1e-12);
        let d = challenge_score(&ScoreInputs { top1: 0.94, top3: 0.9917, runtime_ms: 3.22, c: 1.0 }).unwrap();
        assert!((d - s / 2.0).abs() < 1e-12);
        assert_eq!(challenge_score(&ScoreInputs { top1: 0.0, top3: 0.0, runtime_ms: 1.0, c: 1.0 }).unwrap(), 0.0);
        assert!(challenge_score(&ScoreInputs { top1: 0.5, top3: 0.5, runtime_ms: 0.0, c: 1.0 }).is_err());
        assert!(challenge_score(&ScoreInputs { top1: 0.5, top3: 0.5, runtime_ms: 1.0, c: -1.0 }).is_err());
    }

    #[test]
    fn latency_report_statistics() {
        let r = LatencyReport::from_samples(vec![1.0, 2.0, 3.0], 3).unwrap();
        assert_eq!(r.mean_ms, 2.0);
        assert!((r.std_ms - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((r.min_ms(), r.max_ms()), (1.0, 3.0));
    }
}
