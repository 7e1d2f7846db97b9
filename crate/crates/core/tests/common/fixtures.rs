//! Small on-disk datasets for integration tests.

use std::path::Path;

use cyclet::config::RunConfig;
use cyclet::cycle::CycleSchedule;
use cyclet::data::{generate_synthetic, DomainShift, SynthOutput, SynthSpec};

pub fn tiny_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        num_classes: 3,
        train_per_class: 8,
        val_per_class: 4,
        test_per_class: 4,
        image_side: 40,
        domain_shift: DomainShift::default(),
        seed,
    }
}

pub fn tiny_dataset(root: &Path, seed: u64) -> SynthOutput {
    generate_synthetic(&tiny_spec(seed), root).unwrap()
}

/// Narrow models, a few epochs per stage and one seed.
pub fn tiny_config(root: &Path, out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.synth = tiny_spec(c.seed);
    c.dataset_root = root.to_path_buf();
    c.out_dir = out.to_path_buf();
    c.teacher.num_classes = 3;
    c.teacher.input_side = 32;
    c.student.num_classes = 3;
    c.student.hidden_units = 16;
    c.teacher_training.labeled_epochs = 2;
    c.teacher_training.pseudo_epochs = 1;
    c.teacher_training.batch_size = 8;
    c.cycle = CycleSchedule { batch_size: 8, ..CycleSchedule::three_stage(1, 2, 1) };
    c.ablate.seeds = 1;
    c.eval.iterations = 5;
    c.eval.warmup = 1;
    c
}
