//! Staged training: the three-stage student schedule (head only, everything,
//! head only) and the two-phase teacher pipeline, both on top of one
//! mini-batch AdamW loop with a global epoch counter.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment::{apply, decide, AugPolicy};
use crate::data::{crop, normalize, resize_bilinear, CropMode, DatasetManifest, Geometry, Image, SampleKey};
use crate::error::{Error, Result};
use crate::eval::{EvalSet, Metrics};
use crate::models::{save_checkpoint, stack, Model};
use crate::nncore::{adamw_step, lr_at, AdamWHyper, GroupName, LrSchedule, OptimState, Tape, Tensor};
use crate::rng::keyed_rng;
use crate::ssda::{as_train_manifest, curate, merge, CurationReport, TrainManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageName {
    Exploitation,
    Exploration,
    Stabilization,
    /// Teacher phase A: all parameters on labeled data.
    TeacherLabeled,
    /// Teacher phase B: all parameters on pseudo-labeled data.
    TeacherPseudo,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Exploitation => "exploitation",
            StageName::Exploration => "exploration",
            StageName::Stabilization => "stabilization",
            StageName::TeacherLabeled => "teacher-labeled",
            StageName::TeacherPseudo => "teacher-pseudo",
        }
    }

    /// Groups a stage of this kind must train.
    pub fn required_groups(self) -> &'static [GroupName] {
        match self {
            StageName::Exploitation | StageName::Stabilization => &[GroupName::Head],
            _ => &[GroupName::Backbone, GroupName::Head],
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            StageName::Exploitation,
            StageName::Exploration,
            StageName::Stabilization,
            StageName::TeacherLabeled,
            StageName::TeacherPseudo,
        ]
        .into_iter()
        .find(|n| n.as_str() == s.trim())
        .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub name: StageName,
    pub epochs: u32,
    pub trainable_groups: Vec<GroupName>,
}

impl StageConfig {
    pub fn new(name: StageName, epochs: u32) -> Self {
        Self { name, epochs, trainable_groups: name.required_groups().to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config(format!("stage {} needs at least one epoch", self.name)));
        }
        let got: BTreeSet<_> = self.trainable_groups.iter().copied().collect();
        let want: BTreeSet<_> = self.name.required_groups().iter().copied().collect();
        if got != want {
            return Err(Error::Config(format!(
                "stage {} must train {:?}, configured {:?}",
                self.name, want, got
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleSchedule {
    pub stages: Vec<StageConfig>,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
}

impl Default for CycleSchedule {
    fn default() -> Self {
        Self::three_stage(10, 30, 10)
    }
}

impl CycleSchedule {
    pub fn three_stage(e1: u32, e2: u32, e3: u32) -> Self {
        Self {
            stages: vec![
                StageConfig::new(StageName::Exploitation, e1),
                StageConfig::new(StageName::Exploration, e2),
                StageConfig::new(StageName::Stabilization, e3),
            ],
            lr_schedule: LrSchedule::default(),
            batch_size: 32,
        }
    }

    /// The first `n` stages only.
    pub fn prefix(&self, n: usize) -> Self {
        Self { stages: self.stages[..n.min(self.stages.len())].to_vec(), ..self.clone() }
    }

    pub fn total_epochs(&self) -> u32 {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// Global epoch at which each stage ends (exclusive).
    pub fn boundaries(&self) -> Vec<u32> {
        self.stages
            .iter()
            .scan(0, |acc, s| {
                *acc += s.epochs;
                Some(*acc)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.lr_schedule.validate()?;
        self.stages.iter().try_for_each(StageConfig::validate)
    }
}

/// Training images, resized once to the model's resize side; random crops
/// and augmentation are drawn per epoch.
#[derive(Clone, Debug)]
pub struct TrainSet {
    images: Vec<Image>,
    labels: Vec<usize>,
    geometry: Geometry,
}

impl TrainSet {
    pub fn new(images: &[Image], labels: Vec<usize>, geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!("{} images vs {} labels", images.len(), labels.len())));
        }
        let images = images.par_iter().map(|img| resize_bilinear(img, geometry.resize)).collect();
        Ok(Self { images, labels, geometry })
    }

    pub fn from_manifest(manifest: &TrainManifest, geometry: Geometry) -> Result<Self> {
        Self::new(&manifest.load_images()?, manifest.labels(), geometry)
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

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    /// Random crop, then the augmentation policy, then normalization.
    pub fn example(&self, index: usize, key: SampleKey, policy: Option<&AugPolicy>) -> Result<Tensor> {
        let cropped = crop(&self.images[index], self.geometry.crop, CropMode::Random(key))?;
        let img = match policy {
            Some(p) => apply(&cropped, &decide(p, &mut key.rng("augment"))),
            None => cropped,
        };
        Ok(normalize(&img))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub augment: Option<AugPolicy>,
    pub hyper: AdamWHyper,
}

impl TrainOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, augment: None, hyper: AdamWHyper::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub stage: StageName,
    pub lr: f64,
    pub loss: f64,
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub name: StageName,
    pub first_epoch: u32,
    pub epochs: u32,
    pub checksum_in: [u64; 2],
    pub checksum_out: [u64; 2],
    /// Groups that received gradients at any step of the stage.
    pub grad_groups: BTreeSet<GroupName>,
    pub metrics: Option<Metrics>,
}

impl StageSummary {
    pub fn group_unchanged(&self, group: GroupName) -> bool {
        let i = GroupName::ALL.iter().position(|&g| g == group).unwrap();
        self.checksum_in[i] == self.checksum_out[i]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub stages: Vec<StageSummary>,
    pub warnings: Vec<String>,
}

impl TrainLog {
    pub fn final_metrics(&self) -> Option<Metrics> {
        self.records.last().and_then(|r| r.metrics)
    }

    pub fn lrs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lr).collect()
    }

    /// `epoch,stage,lr,loss,top1,top3`; metrics are blank when not evaluated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,stage,lr,loss,top1,top3\n");
        for r in &self.records {
            let (t1, t3) = r.metrics.map_or((String::new(), String::new()), |m| (m.top1.to_string(), m.top3.to_string()));
            out.push_str(&format!("{},{},{:e},{},{},{}\n", r.epoch, r.stage, r.lr, r.loss, t1, t3));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("stage,first_epoch,epochs,backbone_changed,head_changed,grad_groups,top1,top3\n");
        for s in &self.stages {
            let groups: Vec<&str> = s.grad_groups.iter().map(|g| g.as_str()).collect();
            let (t1, t3) = s.metrics.map_or((String::new(), String::new()), |m| (m.top1.to_string(), m.top3.to_string()));
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.name,
                s.first_epoch,
                s.epochs,
                !s.group_unchanged(GroupName::Backbone),
                !s.group_unchanged(GroupName::Head),
                groups.join("+"),
                t1,
                t3
            ));
        }
        for w in &self.warnings {
            out.push_str(&format!("# warning: {w}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(format!("{stem}.csv"));
        fs::write(&log, self.to_csv()).map_err(|e| Error::io(&log, e))?;
        let summary = dir.join(format!("{stem}_summary.csv"));
        fs::write(&summary, self.summary_csv()).map_err(|e| Error::io(&summary, e))
    }

    fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
        self.stages.extend(other.stages);
        self.warnings.extend(other.warnings);
    }
}

fn checksums(model: &Model) -> [u64; 2] {
    GroupName::ALL.map(|g| model.params().checksum(g))
}

/// Example order for one epoch, keyed by `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u32, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng("shuffle", &[seed, epoch as u64]));
    order
}

/// Train `stage.epochs` epochs starting at global epoch `epoch_offset`.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    model: &mut Model,
    data: &TrainSet,
    stage: &StageConfig,
    optim: &mut OptimState,
    lr_schedule: &LrSchedule,
    epoch_offset: u32,
    batch_size: usize,
    opts: &TrainOptions,
    eval: Option<&EvalSet>,
) -> Result<(Vec<EpochRecord>, StageSummary)> {
    if stage.trainable_groups.is_empty() {
        return Err(Error::Config(format!("stage {} trains no parameter group", stage.name)));
    }
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.geometry().crop != model.config().input_side {
        return Err(Error::Config(format!(
            "training crop {} does not match model input {}",
            data.geometry().crop,
            model.config().input_side
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    model.params_mut().set_trainable_only(&stage.trainable_groups);
    let checksum_in = checksums(model);
    let mut grad_groups = BTreeSet::new();
    let mut records = Vec::with_capacity(stage.epochs as usize);

    for local in 0..stage.epochs {
        let epoch = epoch_offset + local;
        let lr = lr_at(lr_schedule, epoch as i64)?;
        let order = epoch_order(opts.seed, epoch, data.len());
        let mut loss_sum = 0.0;
        for batch in order.chunks(batch_size) {
            let xs = batch
                .par_iter()
                .map(|&i| {
                    let key = SampleKey { seed: opts.seed, epoch: epoch as u64, index: i as u64 };
                    data.example(i, key, opts.augment.as_ref())
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let grads = {
                let mut tape = Tape::new(model.params());
                let x = tape.input(stack(&xs)?);
                let logits = model.forward(&mut tape, x)?;
                let loss = tape.softmax_cross_entropy(logits, &labels)?;
                loss_sum += tape.value(loss)?.data()[0] as f64 * batch.len() as f64;
                tape.backward(loss)?
            };
            grad_groups.extend(grads.param_ids().map(|id| id.group));
            adamw_step(model.params_mut(), &grads, optim, lr as f32)?;
        }
        let metrics = eval.map(|e| e.evaluate(model)).transpose()?;
        let loss = loss_sum / data.len() as f64;
        log::info!(
            "epoch {epoch:>3} {:<13} lr {lr:.1e} loss {loss:.4}{}",
            stage.name.as_str(),
            metrics.map_or(String::new(), |m| format!(" {m}"))
        );
        records.push(EpochRecord { epoch, stage: stage.name, lr, loss, metrics });
    }
    let summary = StageSummary {
        name: stage.name,
        first_epoch: epoch_offset,
        epochs: stage.epochs,
        checksum_in,
        checksum_out: checksums(model),
        grad_groups,
        metrics: records.last().and_then(|r| r.metrics),
    };
    Ok((records, summary))
}

/// Run every stage of `schedule` in order with one global epoch counter.
/// Optimizer moments carry across stages; a group that becomes trainable
/// again after being frozen restarts from zero moments. When
/// `checkpoint_dir` is set, a checkpoint is written at each stage boundary.
pub fn cycle_train(
    model: &mut Model,
    data: &TrainSet,
    schedule: &CycleSchedule,
    opts: &TrainOptions,
    eval: Option<&EvalSet>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    schedule.validate()?;
    let mut optim = OptimState::new(opts.hyper.clone());
    let mut log = TrainLog::default();
    let mut offset = 0;
    let mut previous: Option<&[GroupName]> = None;
    for (i, stage) in schedule.stages.iter().enumerate() {
        if let Some(prev) = previous {
            for g in stage.trainable_groups.iter().filter(|g| !prev.contains(g)) {
                optim.reset_group(*g);
            }
        }
        let (records, summary) =
            run_stage(model, data, stage, &mut optim, &schedule.lr_schedule, offset, schedule.batch_size, opts, eval)?;
        offset += stage.epochs;
        log.records.extend(records);
        log.stages.push(summary);
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(model, &dir.join(format!("stage{}_{}.ckpt", i + 1, stage.name)))?;
        }
        previous = Some(&stage.trainable_groups);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub labeled_epochs: u32,
    pub pseudo_epochs: u32,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub tau: f64,
    /// Phase B trains on labeled + pseudo data instead of pseudo data alone.
    pub combined_phase_b: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            labeled_epochs: 10,
            pseudo_epochs: 10,
            lr_schedule: LrSchedule { lr0: 1.5e-3, ..LrSchedule::default() },
            batch_size: 32,
            tau: 0.9,
            combined_phase_b: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub phase_a: Model,
    pub refined: Model,
    pub log: TrainLog,
    pub curation: CurationReport,
    pub phase_b_ran: bool,
}

/// Phase A on labeled data, curation of the unlabeled set at `cfg.tau`, then
/// phase B on the accepted pseudo labels. Phase B is skipped, with a warning
/// in the log, when nothing is accepted.
pub fn train_teacher_pipeline(
    teacher: Model,
    labeled: &DatasetManifest,
    unlabeled: &DatasetManifest,
    cfg: &TeacherConfig,
    seed: u64,
    eval: Option<&EvalSet>,
) -> Result<TeacherOutcome> {
    let k = teacher.num_classes();
    let labeled_rows = as_train_manifest(labeled, k)?;
    let geometry = teacher.geometry();
    let labeled_set = TrainSet::from_manifest(&labeled_rows, geometry)?;
    let opts = TrainOptions { hyper: AdamWHyper { lr0: cfg.lr_schedule.lr0, ..AdamWHyper::default() }, ..TrainOptions::new(seed) };
    let mut optim = OptimState::new(opts.hyper.clone());
    let mut model = teacher;
    let mut log = TrainLog::default();

    let phase_a = StageConfig::new(StageName::TeacherLabeled, cfg.labeled_epochs);
    let (records, summary) =
        run_stage(&mut model, &labeled_set, &phase_a, &mut optim, &cfg.lr_schedule, 0, cfg.batch_size, &opts, eval)?;
    log.records.extend(records);
    log.stages.push(summary);
    let phase_a_model = model.clone();

    let (pseudo, curation) = curate(&model, unlabeled, cfg.tau)?;
    log::info!("teacher curation: {curation}");
    let mut phase_b_ran = false;
    if pseudo.is_empty() {
        let msg = format!("no pseudo labels accepted at tau={}; phase B skipped", cfg.tau);
        log::warn!("{msg}");
        log.warnings.push(msg);
    } else if cfg.pseudo_epochs > 0 {
        let rows = if cfg.combined_phase_b { merge(labeled, k, &pseudo)? } else { pseudo };
        let set = TrainSet::from_manifest(&rows, geometry)?;
        let phase_b = StageConfig::new(StageName::TeacherPseudo, cfg.pseudo_epochs);
        let mut part = TrainLog::default();
        let (records, summary) = run_stage(
            &mut model,
            &set,
            &phase_b,
            &mut optim,
            &cfg.lr_schedule,
            cfg.labeled_epochs,
            cfg.batch_size,
            &opts,
            eval,
        )?;
        part.records = records;
        part.stages.push(summary);
        log.extend(part);
        phase_b_ran = true;
    }
    Ok(TeacherOutcome { phase_a: phase_a_model, refined: model, log, curation, phase_b_ran })
}
