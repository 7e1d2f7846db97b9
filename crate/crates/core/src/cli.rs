//! Subcommands of the `cyclet` binary.
//!
//! Each `cmd_*` function is usable from tests: it takes a [`Context`],
//! writes its artifacts under the output directory and returns the values it
//! printed. Layout of the output directory:
//!
//! ```text
//! <out>/teacher/   teacher_phase_a.ckpt teacher.ckpt train_log*.csv curation.csv config.ini
//! <out>/pseudo/    pseudo_labels.csv train_rows.csv curation.csv config.ini
//! <out>/student/   student.ckpt checkpoints/stage*_*.ckpt train_log*.csv train_rows.csv config.ini
//! <out>/eval/      metrics_<split>.csv config.ini
//! <out>/bench/     latency.csv score.csv config.ini
//! <out>/ablate/    <table>.csv <table>_runs.csv <table>.dat report.md config.ini runs/<cell>/
//! <out>/report.md
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::cycle::{train_teacher_pipeline, TeacherOutcome};
use crate::data::{generate_synthetic, load_manifest, Split, SynthOutput};
use crate::error::{Error, Result};
use crate::eval::{challenge_score, evaluate, measure_latency, LatencyReport, Metrics, ScoreInputs};
use crate::experiment::{csv_to_markdown, train_student, Ablation, DatasetPaths, ExperimentReport, StudentRun, TestData};
use crate::models::{build_teacher, load_checkpoint, save_checkpoint, Model};
use crate::ssda::{as_train_manifest, curate, merge, CurationReport, TrainManifest};

#[derive(Debug, Parser)]
#[command(name = "cyclet", version, about = "Teacher-student pseudo-labeling with cycle fine-tuning")]
pub struct Cli {
    /// Configuration file (`[section]` + `key = value`); defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed` and `dataset.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `run.out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model checkpoint to load instead of the default for the subcommand.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides `run.dataset_root`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic domain-shifted dataset.
    GenData,
    /// Train the teacher on labeled data, then refine it on its own pseudo labels.
    TrainTeacher,
    /// Pseudo-label the unlabeled split with the teacher at `ssda.tau_student`.
    PseudoLabel,
    /// Cycle-train the student.
    TrainStudent {
        /// Training rows (`path,label,confidence,provenance`); defaults to the
        /// merged pseudo-label output when SSDA is on, else the labeled split.
        #[arg(long)]
        rows: Option<PathBuf>,
    },
    /// Top-1/top-3 accuracy of a checkpoint.
    Eval {
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
    },
    /// Single-image latency and composite score of a checkpoint.
    Bench,
    /// Ablation sweeps over seeds.
    Ablate {
        #[arg(value_enum)]
        which: Sweep,
    },
    /// Collect the artifacts under the output directory into `report.md`.
    Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Train,
    Test,
}

impl From<EvalSplit> for Split {
    fn from(s: EvalSplit) -> Split {
        match s {
            EvalSplit::Train => Split::Train,
            EvalSplit::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Threshold,
    Stages,
    SsdaAug,
    All,
}

/// Resolved configuration plus command-line overrides.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub checkpoint: Option<PathBuf>,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, checkpoint: None })
    }

    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config = config.with_seed(seed);
        }
        if let Some(out) = &cli.out {
            config.out_dir = out.clone();
        }
        if let Some(data) = &cli.data {
            config.dataset_root = data.clone();
        }
        let mut ctx = Self::new(config)?;
        ctx.checkpoint = cli.checkpoint.clone();
        Ok(ctx)
    }

    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    pub fn data(&self) -> DatasetPaths {
        DatasetPaths::new(&self.config.dataset_root)
    }

    pub fn dir(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn run_dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.dir(name);
        self.config.write(&dir.join("config.ini"))?;
        Ok(dir)
    }

    fn checkpoint_or(&self, default: PathBuf) -> PathBuf {
        self.checkpoint.clone().unwrap_or(default)
    }

    fn load_model(&self, default: PathBuf) -> Result<Model> {
        let path = self.checkpoint_or(default);
        if !path.exists() {
            return Err(Error::Data(format!("checkpoint {} not found", path.display())));
        }
        load_checkpoint(&path)
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        crate::data::ensure_dir(dir)?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_data(ctx: &Context) -> Result<SynthOutput> {
    let out = generate_synthetic(&ctx.config.synth, &ctx.config.dataset_root)?;
    println!(
        "dataset {}: train {} / val {} (unlabeled) / test {} images, {} classes",
        out.root.display(),
        out.counts[0],
        out.counts[1],
        out.counts[2],
        ctx.config.synth.num_classes
    );
    Ok(out)
}

pub fn cmd_train_teacher(ctx: &Context) -> Result<TeacherOutcome> {
    let cfg = &ctx.config;
    let k = cfg.teacher.num_classes;
    let data = ctx.data();
    let labeled = data.load(Split::Train, k)?;
    let unlabeled = data.load(Split::Val, k)?;
    let teacher = build_teacher(&cfg.teacher, cfg.seed)?;
    let eval = TestData::load(&data, k)?.eval_set(&teacher)?;
    let outcome = train_teacher_pipeline(teacher, &labeled, &unlabeled, &cfg.teacher_training, cfg.seed, Some(&eval))?;

    let dir = ctx.run_dir("teacher")?;
    save_checkpoint(&outcome.phase_a, &dir.join("teacher_phase_a.ckpt"))?;
    save_checkpoint(&outcome.refined, &dir.join("teacher.ckpt"))?;
    outcome.log.write(&dir, "train_log")?;
    write_file(&dir.join("curation.csv"), &outcome.curation.to_csv())?;
    for w in &outcome.log.warnings {
        eprintln!("warning: {w}");
    }
    println!("teacher curation: {}", outcome.curation);
    if let Some(m) = outcome.log.final_metrics() {
        println!("teacher test {m}");
    }
    Ok(outcome)
}

/// Curate the unlabeled split; returns the merged training rows and the report.
pub fn cmd_pseudo_label(ctx: &Context) -> Result<(TrainManifest, CurationReport)> {
    let cfg = &ctx.config;
    let teacher = ctx.load_model(ctx.dir("teacher").join("teacher.ckpt"))?;
    let k = cfg.student.num_classes;
    if teacher.num_classes() != k {
        return Err(Error::Config(format!("teacher has {} classes, student config {k}", teacher.num_classes())));
    }
    let data = ctx.data();
    let (pseudo, report) = curate(&teacher, &data.load(Split::Val, k)?, cfg.tau_student)?;
    let merged = merge(&data.load(Split::Train, k)?, k, &pseudo)?;

    let dir = ctx.run_dir("pseudo")?;
    pseudo.write(&dir.join("pseudo_labels.csv"))?;
    merged.write(&dir.join("train_rows.csv"))?;
    write_file(&dir.join("curation.csv"), &report.to_csv())?;
    println!("pseudo labels: {report}");
    Ok((merged, report))
}

pub fn cmd_train_student(ctx: &Context, rows: Option<&Path>) -> Result<StudentRun> {
    let cfg = &ctx.config;
    let k = cfg.student.num_classes;
    let data = ctx.data();
    let rows = match rows {
        Some(p) => TrainManifest::read(p, k)?,
        None if cfg.ssda_enabled => {
            let p = ctx.dir("pseudo").join("train_rows.csv");
            if !p.exists() {
                return Err(Error::Data(format!("{} not found; run pseudo-label first or disable ssda", p.display())));
            }
            TrainManifest::read(&p, k)?
        }
        None => as_train_manifest(&data.load(Split::Train, k)?, k)?,
    };
    let test = TestData::load(&data, k)?;
    let dir = ctx.run_dir("student")?;
    let run = train_student(cfg, &rows, cfg.seed, cfg.augment_enabled, &test, Some(&dir.join("checkpoints")))?;

    save_checkpoint(&run.model, &dir.join("student.ckpt"))?;
    run.log.write(&dir, "train_log")?;
    rows.write(&dir.join("train_rows.csv"))?;
    for s in &run.log.stages {
        if let Some(m) = s.metrics {
            println!("after {:<14} (epoch {:>3}) test {m}", s.name.as_str(), s.first_epoch + s.epochs);
        }
    }
    Ok(run)
}

pub fn cmd_eval(ctx: &Context, split: Split) -> Result<Metrics> {
    let model = ctx.load_model(ctx.dir("student").join("student.ckpt"))?;
    let manifest = load_manifest(&ctx.data().manifest(split), model.num_classes())?;
    let m = evaluate(&model, &manifest)?;
    let dir = ctx.run_dir("eval")?;
    write_file(
        &dir.join(format!("metrics_{split}.csv")),
        &format!("split,top1,top3,n\n{split},{},{},{}\n", m.top1, m.top3, m.n_examples),
    )?;
    println!("{} on {split}: {m}", model.arch().as_str());
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub latency: LatencyReport,
    pub metrics: Metrics,
    pub score: f64,
}

pub fn cmd_bench(ctx: &Context) -> Result<BenchOutcome> {
    let cfg = &ctx.config;
    let model = ctx.load_model(ctx.dir("student").join("student.ckpt"))?;
    let metrics = evaluate(&model, &ctx.data().load(Split::Test, model.num_classes())?)?;
    let latency = measure_latency(&model, cfg.eval.iterations, cfg.eval.warmup)?;
    let score = challenge_score(&ScoreInputs { top1: metrics.top1, top3: metrics.top3, runtime_ms: latency.mean_ms, c: cfg.eval.c })?;

    let dir = ctx.run_dir("bench")?;
    write_file(&dir.join("latency.csv"), &latency.to_csv())?;
    write_file(
        &dir.join("score.csv"),
        &format!(
            "top1,top3,mean_ms,std_ms,c,score\n{},{},{},{},{},{}\n",
            metrics.top1, metrics.top3, latency.mean_ms, latency.std_ms, cfg.eval.c, score
        ),
    )?;
    println!("latency: {latency}");
    println!("test {metrics}; score {score:.6} (C = {})", cfg.eval.c);
    Ok(BenchOutcome { latency, metrics, score })
}

pub fn cmd_ablate(ctx: &Context, which: Sweep) -> Result<ExperimentReport> {
    let cfg = &ctx.config;
    let teacher = ctx.load_model(ctx.dir("teacher").join("teacher.ckpt"))?;
    let dir = ctx.dir("ablate");
    let mut ablation = Ablation::new(cfg, &teacher, &ctx.data(), Some(dir.join("runs")))?;
    let mut tables = Vec::new();
    if matches!(which, Sweep::Threshold | Sweep::All) {
        tables.push(ablation.threshold_sweep()?);
    }
    if matches!(which, Sweep::Stages | Sweep::All) {
        tables.push(ablation.stage_ablation()?);
    }
    if matches!(which, Sweep::SsdaAug | Sweep::All) {
        tables.push(ablation.ssda_aug_grid()?);
    }
    let report = ExperimentReport {
        config: cfg.clone(),
        tables,
        curations: ablation.curation_reports().into_iter().cloned().collect(),
    };
    report.write(&dir)?;
    for t in &report.tables {
        println!("{}:\n{t}", t.name);
    }
    Ok(report)
}

/// Gather every known artifact under the output directory.
pub fn cmd_report(ctx: &Context) -> Result<String> {
    let out = &ctx.config.out_dir;
    if !out.is_dir() {
        return Err(Error::Data(format!("output directory {} does not exist", out.display())));
    }
    let sections = [
        ("teacher stages", "teacher/train_log_summary.csv"),
        ("teacher curation", "teacher/curation.csv"),
        ("student curation", "pseudo/curation.csv"),
        ("student stages", "student/train_log_summary.csv"),
        ("evaluation (test)", "eval/metrics_test.csv"),
        ("evaluation (train)", "eval/metrics_train.csv"),
        ("benchmark", "bench/score.csv"),
        ("threshold sweep", "ablate/threshold.csv"),
        ("stage ablation", "ablate/stages.csv"),
        ("SSDA x augmentation", "ablate/ssda_aug.csv"),
    ];
    let mut md = format!("# cyclet report: {}\n\n", out.display());
    let mut found = 0;
    for (title, rel) in sections {
        let p = out.join(rel);
        if let Ok(body) = fs::read_to_string(&p) {
            md.push_str(&format!("## {title}\n\nsource: `{rel}`\n\n{}\n", csv_to_markdown(&body)));
            found += 1;
        }
    }
    if found == 0 {
        return Err(Error::Data(format!("no artifacts found under {}", out.display())));
    }
    write_file(&out.join("report.md"), &md)?;
    print!("{md}");
    Ok(md)
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Context::from_cli(cli)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&ctx).map(drop),
        Command::TrainTeacher => cmd_train_teacher(&ctx).map(drop),
        Command::PseudoLabel => cmd_pseudo_label(&ctx).map(drop),
        Command::TrainStudent { rows } => cmd_train_student(&ctx, rows.as_deref()).map(drop),
        Command::Eval { split } => cmd_eval(&ctx, (*split).into()).map(drop),
        Command::Bench => cmd_bench(&ctx).map(drop),
        Command::Ablate { which } => cmd_ablate(&ctx, *which).map(drop),
        Command::Report => cmd_report(&ctx).map(drop),
    }
}

/// Size rayon's global pool from `CYCLET_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CYCLET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CYCLET_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["cyclet", "ablate", "ssda-aug", "--seed", "7", "--out", "x"]).unwrap();
        assert_eq!(cli.seed, Some(7));
        assert_eq!(cli.out.as_deref(), Some(Path::new("x")));
        assert!(matches!(cli.command, Command::Ablate { which: Sweep::SsdaAug }));
    }

    #[test]
    fn seed_override_reaches_dataset() {
        let cli = Cli::try_parse_from(["cyclet", "gen-data", "--seed", "9"]).unwrap();
        let ctx = Context::from_cli(&cli).unwrap();
        assert_eq!((ctx.config.seed, ctx.config.synth.seed), (9, 9));
    }

    #[test]
    fn unknown_subcommand_is_rejected() {
        assert!(Cli::try_parse_from(["cyclet", "train"]).is_err());
    }
}
