//! Run configuration: `[section]` headers followed by `key = value` lines.
//! `#` starts a comment line. Every key has a default, so an empty file is a
//! valid configuration. Unknown sections or keys are errors.
//!
//! ```text
//! [run]      seed, out_dir
//! [dataset]  root, num_classes, train_per_class, val_per_class, test_per_class,
//!            image_side, hue_shift, brightness_bias, noise_sigma
//! [teacher]  input_side, width_multiplier, blocks_per_stage, labeled_epochs,
//!            pseudo_epochs, lr0, batch_size, combined_phase_b
//! [student]  input_side, width_multiplier, hidden_units
//! [ssda]     tau_teacher, tau_student, enabled
//! [augment]  enabled, flip_threshold, strong_threshold, n, m, ops
//! [cycle]    stage1_epochs, stage2_epochs, stage3_epochs, lr0, decay_factor,
//!            decay_period, batch_size, beta1, beta2, eps, weight_decay
//! [eval]     c, iterations, warmup
//! [ablate]   thresholds, seeds
//! ```
//!
//! Lists (`ops`, `thresholds`) are comma-separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{AugOp, AugPolicy};
use crate::cycle::{CycleSchedule, TeacherConfig};
use crate::data::{DomainShift, SynthSpec};
use crate::error::{Error, Result};
use crate::models::{Arch, ModelConfig};
use crate::nncore::{AdamWHyper, LrSchedule};
use crate::ssda::validate_tau;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub c: f64,
    pub iterations: usize,
    pub warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { c: 1.0, iterations: 20, warmup: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub thresholds: Vec<f64>,
    /// Number of seeds per cell: `seed, seed + 1, ...`.
    pub seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { thresholds: vec![0.0, 0.8, 0.85, 0.9], seeds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset_root: PathBuf,
    pub synth: SynthSpec,
    pub teacher: ModelConfig,
    pub teacher_training: TeacherConfig,
    pub student: ModelConfig,
    pub tau_student: f64,
    pub ssda_enabled: bool,
    pub augment_enabled: bool,
    pub augment: AugPolicy,
    pub cycle: CycleSchedule,
    pub optimizer: AdamWHyper,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            dataset_root: PathBuf::from("data"),
            synth: SynthSpec::default(),
            teacher: ModelConfig { width_multiplier: 0.25, blocks_per_stage: 1, ..ModelConfig::teacher_default() },
            teacher_training: TeacherConfig::default(),
            student: ModelConfig::student_default(),
            tau_student: 0.8,
            ssda_enabled: true,
            augment_enabled: true,
            augment: AugPolicy::default(),
            cycle: CycleSchedule::default(),
            optimizer: AdamWHyper::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

struct Raw {
    source: String,
    values: BTreeMap<(String, String), (String, usize)>,
}

const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["seed", "out_dir"]),
    (
        "dataset",
        &[
            "root",
            "num_classes",
            "train_per_class",
            "val_per_class",
            "test_per_class",
            "image_side",
            "hue_shift",
            "brightness_bias",
            "noise_sigma",
        ],
    ),
    (
        "teacher",
        &[
            "input_side",
            "width_multiplier",
            "blocks_per_stage",
            "labeled_epochs",
            "pseudo_epochs",
            "lr0",
            "batch_size",
            "combined_phase_b",
        ],
    ),
    ("student", &["input_side", "width_multiplier", "hidden_units"]),
    ("ssda", &["tau_teacher", "tau_student", "enabled"]),
    ("augment", &["enabled", "flip_threshold", "strong_threshold", "n", "m", "ops"]),
    (
        "cycle",
        &[
            "stage1_epochs",
            "stage2_epochs",
            "stage3_epochs",
            "lr0",
            "decay_factor",
            "decay_period",
            "batch_size",
            "beta1",
            "beta2",
            "eps",
            "weight_decay",
        ],
    ),
    ("eval", &["c", "iterations", "warmup"]),
    ("ablate", &["thresholds", "seeds"]),
];

impl Raw {
    fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::ConfigSyntax { path: source.to_string(), line, msg };
        let mut section: Option<String> = None;
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let row = raw.trim();
            if row.is_empty() || row.starts_with('#') {
                continue;
            }
            if let Some(name) = row.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| err(line, format!("unterminated header `{row}`")))?.trim();
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(err(line, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = row.split_once('=') else {
                return Err(err(line, format!("expected `key = value`, got `{row}`")));
            };
            let Some(sec) = &section else {
                return Err(err(line, "key outside of any [section]".into()));
            };
            let key = key.trim();
            let known = SCHEMA.iter().find(|(s, _)| s == sec).map(|(_, keys)| keys.contains(&key)).unwrap_or(false);
            if !known {
                return Err(err(line, format!("unknown key `{key}` in [{sec}]")));
            }
            if values.insert((sec.clone(), key.to_string()), (value.trim().to_string(), line)).is_some() {
                return Err(err(line, format!("duplicate key `{key}` in [{sec}]")));
            }
        }
        Ok(Self { source: source.to_string(), values })
    }

    fn get<T: FromStr>(&self, section: &str, key: &str, slot: &mut T) -> Result<()> {
        if let Some((v, line)) = self.values.get(&(section.to_string(), key.to_string())) {
            *slot = v.parse().map_err(|_| Error::ConfigSyntax {
                path: self.source.clone(),
                line: *line,
                msg: format!("cannot parse `{v}` for {section}.{key}"),
            })?;
        }
        Ok(())
    }

    fn get_list<T: FromStr>(&self, section: &str, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some((v, line)) = self.values.get(&(section.to_string(), key.to_string())) {
            *slot = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::ConfigSyntax {
                    path: self.source.clone(),
                    line: *line,
                    msg: format!("cannot parse list `{v}` for {section}.{key}"),
                })?;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let raw = Raw::parse(text, source)?;
        let mut c = RunConfig::default();
        raw.get("run", "seed", &mut c.seed)?;
        raw.get("run", "out_dir", &mut c.out_dir)?;

        raw.get("dataset", "root", &mut c.dataset_root)?;
        raw.get("dataset", "num_classes", &mut c.synth.num_classes)?;
        raw.get("dataset", "train_per_class", &mut c.synth.train_per_class)?;
        raw.get("dataset", "val_per_class", &mut c.synth.val_per_class)?;
        raw.get("dataset", "test_per_class", &mut c.synth.test_per_class)?;
        raw.get("dataset", "image_side", &mut c.synth.image_side)?;
        raw.get("dataset", "hue_shift", &mut c.synth.domain_shift.hue_shift)?;
        raw.get("dataset", "brightness_bias", &mut c.synth.domain_shift.brightness_bias)?;
        raw.get("dataset", "noise_sigma", &mut c.synth.domain_shift.noise_sigma)?;

        raw.get("teacher", "input_side", &mut c.teacher.input_side)?;
        raw.get("teacher", "width_multiplier", &mut c.teacher.width_multiplier)?;
        raw.get("teacher", "blocks_per_stage", &mut c.teacher.blocks_per_stage)?;
        raw.get("teacher", "labeled_epochs", &mut c.teacher_training.labeled_epochs)?;
        raw.get("teacher", "pseudo_epochs", &mut c.teacher_training.pseudo_epochs)?;
        raw.get("teacher", "lr0", &mut c.teacher_training.lr_schedule.lr0)?;
        raw.get("teacher", "batch_size", &mut c.teacher_training.batch_size)?;
        raw.get("teacher", "combined_phase_b", &mut c.teacher_training.combined_phase_b)?;

        raw.get("student", "input_side", &mut c.student.input_side)?;
        raw.get("student", "width_multiplier", &mut c.student.width_multiplier)?;
        raw.get("student", "hidden_units", &mut c.student.hidden_units)?;

        raw.get("ssda", "tau_teacher", &mut c.teacher_training.tau)?;
        raw.get("ssda", "tau_student", &mut c.tau_student)?;
        raw.get("ssda", "enabled", &mut c.ssda_enabled)?;

        raw.get("augment", "enabled", &mut c.augment_enabled)?;
        raw.get("augment", "flip_threshold", &mut c.augment.flip_threshold)?;
        raw.get("augment", "strong_threshold", &mut c.augment.strong_threshold)?;
        raw.get("augment", "n", &mut c.augment.n)?;
        raw.get("augment", "m", &mut c.augment.m)?;
        raw.get_list::<AugOp>("augment", "ops", &mut c.augment.op_set)?;

        let mut epochs = c.cycle.stages.iter().map(|s| s.epochs).collect::<Vec<_>>();
        raw.get("cycle", "stage1_epochs", &mut epochs[0])?;
        raw.get("cycle", "stage2_epochs", &mut epochs[1])?;
        raw.get("cycle", "stage3_epochs", &mut epochs[2])?;
        let mut lr = LrSchedule::default();
        raw.get("cycle", "lr0", &mut lr.lr0)?;
        raw.get("cycle", "decay_factor", &mut lr.decay_factor)?;
        raw.get("cycle", "decay_period", &mut lr.decay_period)?;
        let mut batch = c.cycle.batch_size;
        raw.get("cycle", "batch_size", &mut batch)?;
        c.cycle = CycleSchedule { lr_schedule: lr, batch_size: batch, ..CycleSchedule::three_stage(epochs[0], epochs[1], epochs[2]) };
        raw.get("cycle", "beta1", &mut c.optimizer.beta1)?;
        raw.get("cycle", "beta2", &mut c.optimizer.beta2)?;
        raw.get("cycle", "eps", &mut c.optimizer.eps)?;
        raw.get("cycle", "weight_decay", &mut c.optimizer.weight_decay)?;
        c.optimizer.lr0 = c.cycle.lr_schedule.lr0;

        raw.get("eval", "c", &mut c.eval.c)?;
        raw.get("eval", "iterations", &mut c.eval.iterations)?;
        raw.get("eval", "warmup", &mut c.eval.warmup)?;

        raw.get_list("ablate", "thresholds", &mut c.ablate.thresholds)?;
        raw.get("ablate", "seeds", &mut c.ablate.seeds)?;

        c.student.num_classes = c.synth.num_classes;
        c.teacher.num_classes = c.synth.num_classes;
        c.synth.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Override the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.teacher.validate(Arch::Teacher)?;
        self.student.validate(Arch::Student)?;
        self.augment.validate()?;
        self.cycle.validate()?;
        self.teacher_training.lr_schedule.validate()?;
        if self.teacher_training.labeled_epochs == 0 || self.teacher_training.batch_size == 0 {
            return Err(Error::Config("teacher labeled_epochs and batch_size must be positive".into()));
        }
        validate_tau(self.teacher_training.tau).map_err(|e| Error::Config(e.to_string()))?;
        validate_tau(self.tau_student).map_err(|e| Error::Config(e.to_string()))?;
        for &t in &self.ablate.thresholds {
            validate_tau(t).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.ablate.seeds == 0 {
            return Err(Error::Config("ablate.seeds must be positive".into()));
        }
        if !(self.eval.c > 0.0) || self.eval.iterations == 0 {
            return Err(Error::Config("eval.c and eval.iterations must be positive".into()));
        }
        let h = &self.optimizer;
        if !(0.0..1.0).contains(&h.beta1) || !(0.0..1.0).contains(&h.beta2) || !(h.eps > 0.0) || h.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer settings {h:?}")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let s_ = &mut s;
        let mut section = |name: &str, pairs: Vec<(&str, String)>| {
            let _ = writeln!(s_, "[{name}]");
            for (k, v) in pairs {
                let _ = writeln!(s_, "{k} = {v}");
            }
            let _ = writeln!(s_);
        };
        let d = &self.synth;
        let t = &self.teacher_training;
        let a = &self.augment;
        let cy = &self.cycle;
        let o = &self.optimizer;
        let list = |v: Vec<String>| v.join(", ");
        section("run", vec![("seed", self.seed.to_string()), ("out_dir", self.out_dir.display().to_string())]);
        section(
            "dataset",
            vec![
                ("root", self.dataset_root.display().to_string()),
                ("num_classes", d.num_classes.to_string()),
                ("train_per_class", d.train_per_class.to_string()),
                ("val_per_class", d.val_per_class.to_string()),
                ("test_per_class", d.test_per_class.to_string()),
                ("image_side", d.image_side.to_string()),
                ("hue_shift", format!("{:?}", d.domain_shift.hue_shift)),
                ("brightness_bias", format!("{:?}", d.domain_shift.brightness_bias)),
                ("noise_sigma", format!("{:?}", d.domain_shift.noise_sigma)),
            ],
        );
        section(
            "teacher",
            vec![
                ("input_side", self.teacher.input_side.to_string()),
                ("width_multiplier", format!("{:?}", self.teacher.width_multiplier)),
                ("blocks_per_stage", self.teacher.blocks_per_stage.to_string()),
                ("labeled_epochs", t.labeled_epochs.to_string()),
                ("pseudo_epochs", t.pseudo_epochs.to_string()),
                ("lr0", format!("{:?}", t.lr_schedule.lr0)),
                ("batch_size", t.batch_size.to_string()),
                ("combined_phase_b", t.combined_phase_b.to_string()),
            ],
        );
        section(
            "student",
            vec![
                ("input_side", self.student.input_side.to_string()),
                ("width_multiplier", format!("{:?}", self.student.width_multiplier)),
                ("hidden_units", self.student.hidden_units.to_string()),
            ],
        );
        section(
            "ssda",
            vec![
                ("tau_teacher", format!("{:?}", t.tau)),
                ("tau_student", format!("{:?}", self.tau_student)),
                ("enabled", self.ssda_enabled.to_string()),
            ],
        );
        section(
            "augment",
            vec![
                ("enabled", self.augment_enabled.to_string()),
                ("flip_threshold", format!("{:?}", a.flip_threshold)),
                ("strong_threshold", format!("{:?}", a.strong_threshold)),
                ("n", a.n.to_string()),
                ("m", a.m.to_string()),
                ("ops", list(a.op_set.iter().map(|o| o.to_string()).collect())),
            ],
        );
        section(
            "cycle",
            vec![
                ("stage1_epochs", cy.stages[0].epochs.to_string()),
                ("stage2_epochs", cy.stages[1].epochs.to_string()),
                ("stage3_epochs", cy.stages[2].epochs.to_string()),
                ("lr0", format!("{:?}", cy.lr_schedule.lr0)),
                ("decay_factor", format!("{:?}", cy.lr_schedule.decay_factor)),
                ("decay_period", cy.lr_schedule.decay_period.to_string()),
                ("batch_size", cy.batch_size.to_string()),
                ("beta1", format!("{:?}", o.beta1)),
                ("beta2", format!("{:?}", o.beta2)),
                ("eps", format!("{:?}", o.eps)),
                ("weight_decay", format!("{:?}", o.weight_decay)),
            ],
        );
        section(
            "eval",
            vec![
                ("c", format!("{:?}", self.eval.c)),
                ("iterations", self.eval.iterations.to_string()),
                ("warmup", self.eval.warmup.to_string()),
            ],
        );
        section(
            "ablate",
            vec![
                ("thresholds", list(self.ablate.thresholds.iter().map(|t| format!("{t:?}")).collect())),
                ("seeds", self.ablate.seeds.to_string()),
            ],
        );
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn domain_shift(&self) -> &DomainShift {
        &self.synth.domain_shift
    }

    pub fn augment_policy(&self) -> Option<AugPolicy> {
        self.augment_enabled.then(|| self.augment.clone())
    }
}
