//! End-to-end pipeline steps and the ablation sweeps built from them.
//!
//! Every student run is identified by a [`StudentCell`]: which pseudo-label
//! threshold (if any) fed the training set, whether augmentation was on, and
//! the seed. Runs are cached by cell, so a sweep that asks for the same cell
//! twice trains it once; stage-ablation rows read the stage-boundary metrics
//! of the full three-stage run, which equal a run truncated after that stage.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::cycle::{cycle_train, TrainLog, TrainOptions, TrainSet};
use crate::data::{load_images, load_manifest, DatasetManifest, Image, Split};
use crate::error::{Error, Result};
use crate::eval::{EvalSet, Metrics};
use crate::models::{build_student, save_checkpoint, Model};
use crate::ssda::{as_train_manifest, curate, merge, CurationReport, TrainManifest};

/// Paths of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self, split: Split) -> PathBuf {
        self.root.join(format!("{}.csv", split.as_str()))
    }

    pub fn load(&self, split: Split, num_classes: usize) -> Result<DatasetManifest> {
        load_manifest(&self.manifest(split), num_classes)
    }
}

/// Held-out test images with labels, loaded once.
pub struct TestData {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl TestData {
    pub fn load(paths: &DatasetPaths, num_classes: usize) -> Result<Self> {
        let m = paths.load(Split::Test, num_classes)?;
        let labels = m
            .entries
            .iter()
            .map(|e| e.label.ok_or_else(|| Error::Data(format!("test entry {} is unlabeled", e.path.display()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images: load_images(&m)?, labels })
    }

    pub fn eval_set(&self, model: &Model) -> Result<EvalSet> {
        EvalSet::for_model(model, &self.images, self.labels.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct StudentCell {
    /// Pseudo-label threshold; `None` trains on labeled data alone.
    pub tau: Option<f64>,
    pub augment: bool,
    pub seed: u64,
}

impl StudentCell {
    fn key(&self) -> (Option<u64>, bool, u64) {
        (self.tau.map(f64::to_bits), self.augment, self.seed)
    }

    pub fn dir_name(&self) -> String {
        let ssda = self.tau.map_or("nossda".to_string(), |t| format!("tau{t}"));
        let aug = if self.augment { "aug" } else { "noaug" };
        format!("{ssda}_{aug}_seed{}", self.seed)
    }
}

impl fmt::Display for StudentCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dir_name())
    }
}

/// Outcome of one student training run.
#[derive(Clone, Debug)]
pub struct StudentRun {
    pub model: Model,
    pub log: TrainLog,
    pub training_rows: usize,
}

impl StudentRun {
    /// Test metrics after the first `stages` stages.
    pub fn stage_metrics(&self, stages: usize) -> Option<Metrics> {
        self.log.stages.get(stages.checked_sub(1)?).and_then(|s| s.metrics)
    }
}

/// Train one student with the configured schedule. `rows` is the (possibly
/// merged) training manifest.
pub fn train_student(
    cfg: &RunConfig,
    rows: &TrainManifest,
    seed: u64,
    augment: bool,
    test: &TestData,
    checkpoint_dir: Option<&Path>,
) -> Result<StudentRun> {
    let mut model = build_student(&cfg.student, seed)?;
    let set = TrainSet::from_manifest(rows, model.geometry())?;
    let eval = test.eval_set(&model)?;
    let opts = TrainOptions {
        seed,
        augment: augment.then(|| cfg.augment.clone()),
        hyper: cfg.optimizer.clone(),
    };
    let log = cycle_train(&mut model, &set, &cfg.cycle, &opts, Some(&eval), checkpoint_dir)?;
    Ok(StudentRun { model, log, training_rows: rows.len() })
}

/// Caches curation results per threshold and student runs per cell.
pub struct Ablation<'a> {
    cfg: &'a RunConfig,
    teacher: &'a Model,
    labeled: DatasetManifest,
    unlabeled: DatasetManifest,
    test: TestData,
    curations: BTreeMap<u64, (TrainManifest, CurationReport)>,
    runs: BTreeMap<(Option<u64>, bool, u64), (StudentCell, StudentRun)>,
    run_root: Option<PathBuf>,
}

impl<'a> Ablation<'a> {
    pub fn new(cfg: &'a RunConfig, teacher: &'a Model, data: &DatasetPaths, run_root: Option<PathBuf>) -> Result<Self> {
        let k = cfg.student.num_classes;
        if teacher.num_classes() != k {
            return Err(Error::Config(format!("teacher has {} classes, config {k}", teacher.num_classes())));
        }
        Ok(Self {
            cfg,
            teacher,
            labeled: data.load(Split::Train, k)?,
            unlabeled: data.load(Split::Val, k)?,
            test: TestData::load(data, k)?,
            curations: BTreeMap::new(),
            runs: BTreeMap::new(),
            run_root,
        })
    }

    pub fn curation(&mut self, tau: f64) -> Result<&(TrainManifest, CurationReport)> {
        if !self.curations.contains_key(&tau.to_bits()) {
            let c = curate(self.teacher, &self.unlabeled, tau)?;
            self.curations.insert(tau.to_bits(), c);
        }
        Ok(&self.curations[&tau.to_bits()])
    }

    pub fn rows(&mut self, tau: Option<f64>) -> Result<TrainManifest> {
        let k = self.cfg.student.num_classes;
        match tau {
            None => as_train_manifest(&self.labeled, k),
            Some(t) => {
                let pseudo = self.curation(t)?.0.clone();
                merge(&self.labeled, k, &pseudo)
            }
        }
    }

    pub fn run(&mut self, cell: StudentCell) -> Result<&StudentRun> {
        if !self.runs.contains_key(&cell.key()) {
            let rows = self.rows(cell.tau)?;
            log::info!("training cell {cell} on {} rows", rows.len());
            let run = train_student(self.cfg, &rows, cell.seed, cell.augment, &self.test, None)?;
            if let Some(root) = &self.run_root {
                let dir = root.join(cell.dir_name());
                run.log.write(&dir, "train_log")?;
                rows.write(&dir.join("train_rows.csv"))?;
                save_checkpoint(&run.model, &dir.join("student.ckpt"))?;
                let mut snapshot = self.cfg.clone();
                snapshot.seed = cell.seed;
                snapshot.ssda_enabled = cell.tau.is_some();
                snapshot.tau_student = cell.tau.unwrap_or(snapshot.tau_student);
                snapshot.augment_enabled = cell.augment;
                snapshot.write(&dir.join("config.ini"))?;
            }
            self.runs.insert(cell.key(), (cell, run));
        }
        Ok(&self.runs[&cell.key()].1)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.cfg.ablate.seeds as u64).map(|i| self.cfg.seed + i).collect()
    }

    fn cell_row(&mut self, label: String, tau: Option<f64>, augment: bool, stages: usize) -> Result<SweepRow> {
        let mut top1 = Vec::new();
        let mut top3 = Vec::new();
        let mut runs = Vec::new();
        for seed in self.seeds() {
            let cell = StudentCell { tau, augment, seed };
            let m = self.run(cell)?.stage_metrics(stages).ok_or_else(|| Error::Data(format!("no metrics for {cell}")))?;
            top1.push(m.top1);
            top3.push(m.top3);
            runs.push(cell.dir_name());
        }
        Ok(SweepRow { label, top1, top3, runs })
    }

    pub fn threshold_sweep(&mut self) -> Result<SweepTable> {
        let stages = self.cfg.cycle.stages.len();
        let aug = self.cfg.augment_enabled;
        let mut rows = Vec::new();
        for tau in self.cfg.ablate.thresholds.clone() {
            rows.push(self.cell_row(format!("{tau}"), Some(tau), aug, stages)?);
        }
        Ok(SweepTable { name: "threshold".into(), key: "tau".into(), rows })
    }

    pub fn stage_ablation(&mut self) -> Result<SweepTable> {
        let tau = self.cfg.ssda_enabled.then_some(self.cfg.tau_student);
        let aug = self.cfg.augment_enabled;
        let labels = ["S1", "S1+2", "S1+2+3"];
        let mut rows = Vec::new();
        for n in 1..=self.cfg.cycle.stages.len() {
            rows.push(self.cell_row(labels[n - 1].to_string(), tau, aug, n)?);
        }
        Ok(SweepTable { name: "stages".into(), key: "stages".into(), rows })
    }

    pub fn ssda_aug_grid(&mut self) -> Result<SweepTable> {
        let stages = self.cfg.cycle.stages.len();
        let tau = self.cfg.tau_student;
        let grid = [("baseline", None, false), ("aug", None, true), ("ssda", Some(tau), false), ("ssda+aug", Some(tau), true)];
        let mut rows = Vec::new();
        for (label, t, aug) in grid {
            rows.push(self.cell_row(label.to_string(), t, aug, stages)?);
        }
        Ok(SweepTable { name: "ssda_aug".into(), key: "method".into(), rows })
    }

    pub fn curation_reports(&self) -> Vec<&CurationReport> {
        self.curations.values().map(|(_, r)| r).collect()
    }
}

/// Per-seed results of one sweep cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub top1: Vec<f64>,
    pub top3: Vec<f64>,
    /// Run directory names, one per seed.
    pub runs: Vec<String>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (zero for a single value).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// `sqrt((s_a^2 + s_b^2) / 2)` for equally sized groups.
pub fn pooled_std(a: &[f64], b: &[f64]) -> f64 {
    ((std_dev(a).powi(2) + std_dev(b).powi(2)) / 2.0).sqrt()
}

impl SweepRow {
    pub fn top1_mean(&self) -> f64 {
        mean(&self.top1)
    }

    pub fn top3_mean(&self) -> f64 {
        mean(&self.top3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub name: String,
    pub key: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aggregated table: one line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},top1_mean,top1_std,top3_mean,top3_std,seeds\n", self.key);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.label,
                r.top1_mean(),
                std_dev(&r.top1),
                r.top3_mean(),
                std_dev(&r.top3),
                r.top1.len()
            ));
        }
        out
    }

    /// One line per (cell, seed) with the run directory it came from.
    pub fn runs_csv(&self) -> String {
        let mut out = format!("{},top1,top3,run\n", self.key);
        for r in &self.rows {
            for i in 0..r.top1.len() {
                out.push_str(&format!("{},{},{},{}\n", r.label, r.top1[i], r.top3[i], r.runs[i]));
            }
        }
        out
    }

    /// Plot data: x position, label, mean and standard deviation of top-1.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("# x label top1_mean top1_std top3_mean top3_std\n");
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{i} {} {:.6} {:.6} {:.6} {:.6}\n",
                r.label,
                r.top1_mean(),
                std_dev(&r.top1),
                r.top3_mean(),
                std_dev(&r.top3)
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::data::ensure_dir(dir)?;
        for (name, body) in [
            (format!("{}.csv", self.name), self.to_csv()),
            (format!("{}_runs.csv", self.name), self.runs_csv()),
            (format!("{}.dat", self.name), self.plot_data()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

impl fmt::Display for SweepTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10} {:>9} {:>10} {:>9}", self.key, "top1", "±", "top3", "±")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>10.4} {:>9.4} {:>10.4} {:>9.4}",
                r.label,
                r.top1_mean(),
                std_dev(&r.top1),
                r.top3_mean(),
                std_dev(&r.top3)
            )?;
        }
        Ok(())
    }
}

/// Sweep tables of one `ablate` invocation with the config that produced them.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub tables: Vec<SweepTable>,
    pub curations: Vec<CurationReport>,
}

impl ExperimentReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            out.push_str(&format!("## {}\n\n", t.name));
            out.push_str(&csv_to_markdown(&t.to_csv()));
            out.push('\n');
        }
        if !self.curations.is_empty() {
            out.push_str("## curation\n\n");
            for c in &self.curations {
                out.push_str(&format!("- {c}\n"));
            }
        }
        out
    }

    /// Tables, curation reports and `config.ini` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::data::ensure_dir(dir)?;
        self.config.write(&dir.join("config.ini"))?;
        for t in &self.tables {
            t.write(dir)?;
        }
        for c in &self.curations {
            let p = dir.join(format!("curation_tau{}.csv", c.tau));
            fs::write(&p, c.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("report.md");
        fs::write(&p, self.to_markdown()).map_err(|e| Error::io(&p, e))
    }
}

/// Render a comma-separated table (header first) as a markdown table.
pub fn csv_to_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
        if i == 0 {
            out.push_str(&format!("|{}\n", "---|".repeat(cells.len())));
        }
    }
    out
}
