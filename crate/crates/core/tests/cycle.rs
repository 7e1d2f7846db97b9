mod common;

use std::collections::BTreeSet;

use common::fixtures::tiny_dataset;
use cyclet::cycle::{cycle_train, train_teacher_pipeline, CycleSchedule, StageName, TeacherConfig, TrainOptions, TrainSet};
use cyclet::data::{load_manifest, Split};
use cyclet::models::{build_student, build_teacher, write_checkpoint, ModelConfig};
use cyclet::nncore::{lr_at, GroupName, LrSchedule};
use cyclet::ssda::as_train_manifest;
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    root: std::path::PathBuf,
    set: TrainSet,
    cfg: ModelConfig,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let root = dir.path().join("data");
    tiny_dataset(&root, 3);
    let manifest = load_manifest(&root.join("train.csv"), 3).unwrap();
    let rows = as_train_manifest(&manifest, 3).unwrap();
    let cfg = ModelConfig { num_classes: 3, hidden_units: 16, ..ModelConfig::student_default() };
    let geometry = build_student(&cfg, 0).unwrap().geometry();
    let set = TrainSet::from_manifest(&rows, geometry).unwrap();
    Fixture { _dir: dir, root, set, cfg }
}

fn schedule(e1: u32, e2: u32, e3: u32) -> CycleSchedule {
    CycleSchedule {
        lr_schedule: LrSchedule { lr0: 1e-3, decay_factor: 0.1, decay_period: 2 },
        batch_size: 8,
        ..CycleSchedule::three_stage(e1, e2, e3)
    }
}

#[test]
fn frozen_stages_leave_backbone_untouched() {
    let f = fixture();
    let mut model = build_student(&f.cfg, 1).unwrap();
    let log = cycle_train(&mut model, &f.set, &schedule(2, 2, 2), &TrainOptions::new(1), None, None).unwrap();
    let head: BTreeSet<_> = [GroupName::Head].into();
    let both: BTreeSet<_> = GroupName::ALL.into();
    for s in &log.stages {
        match s.name {
            StageName::Exploitation | StageName::Stabilization => {
                assert!(s.group_unchanged(GroupName::Backbone), "{}", s.name);
                assert!(!s.group_unchanged(GroupName::Head), "{}", s.name);
                assert_eq!(s.grad_groups, head, "{}", s.name);
            }
            _ => {
                assert!(!s.group_unchanged(GroupName::Backbone));
                assert_eq!(s.grad_groups, both);
            }
        }
    }
}

#[test]
fn learning_rate_follows_global_epoch_across_stages() {
    let f = fixture();
    let sched = schedule(1, 3, 2);
    let mut model = build_student(&f.cfg, 2).unwrap();
    let log = cycle_train(&mut model, &f.set, &sched, &TrainOptions::new(2), None, None).unwrap();
    let epochs: Vec<u32> = log.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, (0..6).collect::<Vec<_>>());
    let expected: Vec<f64> = (0..6).map(|e| lr_at(&sched.lr_schedule, e).unwrap()).collect();
    assert_eq!(log.lrs(), expected);
    assert_eq!(sched.boundaries(), vec![1, 4, 6]);
}

#[test]
fn identical_seeds_give_identical_weights() {
    let f = fixture();
    let run = |seed| {
        let mut model = build_student(&f.cfg, seed).unwrap();
        let log = cycle_train(&mut model, &f.set, &schedule(1, 2, 1), &TrainOptions::new(seed), None, None).unwrap();
        (write_checkpoint(&model), log)
    };
    let (a, log_a) = run(5);
    let (b, log_b) = run(5);
    let (c, _) = run(6);
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_ne!(a, c);
}

#[test]
fn truncated_schedule_matches_stage_boundary_checkpoint() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let full = schedule(1, 2, 1);
    let mut model = build_student(&f.cfg, 4).unwrap();
    cycle_train(&mut model, &f.set, &full, &TrainOptions::new(4), None, Some(dir.path())).unwrap();
    for n in 1..=3 {
        let mut m = build_student(&f.cfg, 4).unwrap();
        cycle_train(&mut m, &f.set, &full.prefix(n), &TrainOptions::new(4), None, None).unwrap();
        let name = format!("stage{n}_{}.ckpt", full.stages[n - 1].name);
        let saved = std::fs::read(dir.path().join(name)).unwrap();
        assert_eq!(write_checkpoint(&m), saved, "prefix {n}");
    }
}

#[test]
fn teacher_phase_b_is_skipped_when_nothing_passes() {
    let f = fixture();
    let labeled = load_manifest(&f.root.join("train.csv"), 3).unwrap();
    let unlabeled = load_manifest(&f.root.join("val.csv"), 3).unwrap();
    assert_eq!(unlabeled.entries[0].label, None);
    let cfg = ModelConfig { num_classes: 3, width_multiplier: 0.25, blocks_per_stage: 1, ..ModelConfig::teacher_default() };
    let cfg = ModelConfig { input_side: 32, ..cfg };
    let teacher = build_teacher(&cfg, 0).unwrap();
    let tc = TeacherConfig { labeled_epochs: 1, pseudo_epochs: 2, batch_size: 8, tau: 1.0, ..TeacherConfig::default() };
    let out = train_teacher_pipeline(teacher, &labeled, &unlabeled, &tc, 0, None).unwrap();
    assert_eq!(out.curation.accepted, 0);
    assert!(!out.phase_b_ran);
    assert_eq!(out.log.stages.len(), 1);
    assert_eq!(out.log.warnings.len(), 1);
    assert_eq!(write_checkpoint(&out.phase_a), write_checkpoint(&out.refined));
}

#[test]
fn teacher_phase_b_continues_the_epoch_counter() {
    let f = fixture();
    let labeled = load_manifest(&f.root.join("train.csv"), 3).unwrap();
    let unlabeled = load_manifest(&f.root.join(format!("{}.csv", Split::Val)), 3).unwrap();
    let cfg = ModelConfig { num_classes: 3, width_multiplier: 0.25, blocks_per_stage: 1, input_side: 32, ..ModelConfig::teacher_default() };
    let tc = TeacherConfig { labeled_epochs: 2, pseudo_epochs: 1, batch_size: 8, tau: 0.0, ..TeacherConfig::default() };
    let out = train_teacher_pipeline(build_teacher(&cfg, 0).unwrap(), &labeled, &unlabeled, &tc, 0, None).unwrap();
    assert!(out.phase_b_ran);
    assert_eq!(out.curation.accepted, unlabeled.len());
    let epochs: Vec<u32> = out.log.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![0, 1, 2]);
    assert_eq!(out.log.stages[1].name, StageName::TeacherPseudo);
    assert_ne!(write_checkpoint(&out.phase_a), write_checkpoint(&out.refined));
}
