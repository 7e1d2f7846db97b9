//! Teacher and student networks.
//!
//! Both split into a `backbone` group (everything up to and including global
//! average pooling) and a `head` group (the dense layers after it).
//!
//! Every convolution pads `k / 2` on each side: "same" output at stride 1,
//! `ceil(side / 2)` at stride 2. Pooling uses no padding.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::Geometry;
use crate::error::{Error, Result};
use crate::nncore::{GroupName, ParamId, ParamSet, Tape, Tensor, Var};
use crate::rng::keyed_rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Teacher,
    Student,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Teacher => "teacher",
            Arch::Student => "student",
        }
    }

    /// Resize side that keeps the full-scale resize:crop ratio
    /// (256:224 for the teacher, 160:128 for the student).
    pub fn geometry(self, input_side: usize) -> Geometry {
        let resize = match self {
            Arch::Teacher => (input_side * 8).div_ceil(7),
            Arch::Student => (input_side * 5).div_ceil(4),
        };
        Geometry { resize, crop: input_side }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "teacher" => Ok(Arch::Teacher),
            "student" => Ok(Arch::Student),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_side: usize,
    pub width_multiplier: f64,
    /// Hidden width of the student head. Ignored by the teacher.
    pub hidden_units: usize,
    /// Residual blocks per teacher stage. Ignored by the student.
    pub blocks_per_stage: usize,
}

impl ModelConfig {
    pub fn teacher_default() -> Self {
        Self { num_classes: 10, input_side: 56, width_multiplier: 1.0, hidden_units: 128, blocks_per_stage: 2 }
    }

    pub fn student_default() -> Self {
        Self { num_classes: 10, input_side: 32, width_multiplier: 1.0, hidden_units: 128, blocks_per_stage: 1 }
    }

    pub fn validate(&self, arch: Arch) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!("width_multiplier must be positive, got {}", self.width_multiplier)));
        }
        if arch == Arch::Student && self.hidden_units == 0 {
            return Err(Error::Config("hidden_units must be positive".into()));
        }
        if arch == Arch::Teacher && self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be positive".into()));
        }
        let stride = total_stride(arch);
        if self.input_side < stride || !self.input_side.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "input_side {} incompatible with the {arch} stride plan (needs a multiple of 4, at least {stride})",
                self.input_side
            )));
        }
        Ok(())
    }

    fn width(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(4)
    }
}

fn total_stride(arch: Arch) -> usize {
    match arch {
        Arch::Teacher => 32,
        Arch::Student => 8,
    }
}

const TEACHER_CHANNELS: [usize; 4] = [32, 64, 128, 256];
/// `(output channels, stride)` of the student's inverted-residual blocks.
const STUDENT_BLOCKS: [(usize, usize); 5] = [(16, 2), (16, 1), (24, 2), (24, 1), (32, 1)];
const STUDENT_STEM: usize = 8;
const EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    Full,
    Depthwise,
    Pointwise,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    kind: ConvKind,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
enum Block {
    /// `relu(conv(relu(conv(x))) + shortcut(x))`.
    Basic { conv1: Conv, conv2: Conv, shortcut: Option<Conv> },
    /// Expand (1x1) → depthwise 3x3 → project (1x1), skip when shapes agree.
    InvertedResidual { expand: Conv, depthwise: Conv, project: Conv, residual: bool },
}

#[derive(Clone, Debug)]
struct Plan {
    stem: Conv,
    stem_pool: bool,
    blocks: Vec<Block>,
    head: Vec<Dense>,
}

/// A built network: its configuration, layer plan and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    arch: Arch,
    config: ModelConfig,
    params: ParamSet,
    plan: Plan,
}

struct Builder<R> {
    params: ParamSet,
    rng: R,
}

impl<R: Rng> Builder<R> {
    fn he_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    fn conv(&mut self, name: &str, kind: ConvKind, c_in: usize, c_out: usize, k: usize, stride: usize) -> Conv {
        let per = if kind == ConvKind::Depthwise { 1 } else { c_in };
        let w = self.he_uniform(&[c_out, per, k, k], per * k * k);
        let w = self.params.register(GroupName::Backbone, format!("{name}.w"), w);
        let b = self.params.register(GroupName::Backbone, format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv { w, b, kind, stride, pad: k / 2 }
    }

    fn dense(&mut self, name: &str, d_in: usize, d_out: usize) -> Dense {
        let w = self.he_uniform(&[d_out, d_in], d_in);
        let w = self.params.register(GroupName::Head, format!("{name}.w"), w);
        let b = self.params.register(GroupName::Head, format!("{name}.b"), Tensor::zeros(&[d_out]));
        Dense { w, b }
    }
}

pub fn build_teacher(config: &ModelConfig, seed: u64) -> Result<Model> {
    build(Arch::Teacher, config, seed)
}

pub fn build_student(config: &ModelConfig, seed: u64) -> Result<Model> {
    build(Arch::Student, config, seed)
}

pub fn build(arch: Arch, config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate(arch)?;
    let mut b = Builder { params: ParamSet::new(), rng: keyed_rng(&format!("init-{arch}"), &[seed]) };
    let plan = match arch {
        Arch::Teacher => {
            let widths: Vec<usize> = TEACHER_CHANNELS.iter().map(|&c| config.width(c)).collect();
            let stem = b.conv("stem", ConvKind::Full, 3, widths[0], 3, 2);
            let mut blocks = Vec::new();
            let mut c_in = widths[0];
            for (s, &c_out) in widths.iter().enumerate() {
                for i in 0..config.blocks_per_stage {
                    let stride = if s > 0 && i == 0 { 2 } else { 1 };
                    let name = format!("stage{}.block{}", s + 1, i + 1);
                    let conv1 = b.conv(&format!("{name}.conv1"), ConvKind::Full, c_in, c_out, 3, stride);
                    let conv2 = b.conv(&format!("{name}.conv2"), ConvKind::Full, c_out, c_out, 3, 1);
                    let shortcut = (stride != 1 || c_in != c_out)
                        .then(|| b.conv(&format!("{name}.shortcut"), ConvKind::Full, c_in, c_out, 1, stride));
                    blocks.push(Block::Basic { conv1, conv2, shortcut });
                    c_in = c_out;
                }
            }
            let head = vec![b.dense("fc", c_in, config.num_classes)];
            Plan { stem, stem_pool: true, blocks, head }
        }
        Arch::Student => {
            let stem_c = config.width(STUDENT_STEM);
            let stem = b.conv("stem", ConvKind::Full, 3, stem_c, 3, 2);
            let mut blocks = Vec::new();
            let mut c_in = stem_c;
            for (i, &(base, stride)) in STUDENT_BLOCKS.iter().enumerate() {
                let c_out = config.width(base);
                let hidden = c_in * EXPANSION;
                let name = format!("block{}", i + 1);
                let expand = b.conv(&format!("{name}.expand"), ConvKind::Pointwise, c_in, hidden, 1, 1);
                let depthwise = b.conv(&format!("{name}.depthwise"), ConvKind::Depthwise, hidden, hidden, 3, stride);
                let project = b.conv(&format!("{name}.project"), ConvKind::Pointwise, hidden, c_out, 1, 1);
                blocks.push(Block::InvertedResidual { expand, depthwise, project, residual: stride == 1 && c_in == c_out });
                c_in = c_out;
            }
            let head = vec![b.dense("fc1", c_in, config.hidden_units), b.dense("fc2", config.hidden_units, config.num_classes)];
            Plan { stem, stem_pool: false, blocks, head }
        }
    };
    Ok(Model { arch, config: config.clone(), params: b.params, plan })
}

impl Model {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn geometry(&self) -> Geometry {
        self.arch.geometry(self.config.input_side)
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Number of dense layers in the head.
    pub fn head_depth(&self) -> usize {
        self.plan.head.len()
    }

    /// `(input, output)` widths of each head layer.
    pub fn head_shape(&self) -> Vec<(usize, usize)> {
        self.plan
            .head
            .iter()
            .map(|d| {
                let s = self.params.get(d.w).value.shape();
                (s[1], s[0])
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let side = self.config.input_side;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != side || shape[3] != side {
            return Err(Error::shape(
                "model input",
                format!("expected [N, 3, {side}, {side}], got {shape:?}"),
            ));
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape<'_>, x: Var, c: &Conv) -> Result<Var> {
        let (w, b) = (tape.param(c.w), tape.param(c.b));
        match c.kind {
            ConvKind::Full => tape.conv2d(x, w, b, c.stride, c.pad),
            ConvKind::Depthwise => tape.depthwise_conv2d(x, w, b, c.stride, c.pad),
            ConvKind::Pointwise => tape.pointwise_conv(x, w, b),
        }
    }

    /// Pooled backbone features, `[N, C]`.
    pub fn features(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.check_input(tape.value(x)?.shape())?;
        let mut h = self.conv(tape, x, &self.plan.stem)?;
        h = tape.relu(h)?;
        if self.plan.stem_pool {
            h = tape.max_pool2d(h, 2, 2)?;
        }
        for block in &self.plan.blocks {
            h = match block {
                Block::Basic { conv1, conv2, shortcut } => {
                    let y = self.conv(tape, h, conv1)?;
                    let y = tape.relu(y)?;
                    let y = self.conv(tape, y, conv2)?;
                    let skip = match shortcut {
                        Some(s) => self.conv(tape, h, s)?,
                        None => h,
                    };
                    let y = tape.add(y, skip)?;
                    tape.relu(y)?
                }
                Block::InvertedResidual { expand, depthwise, project, residual } => {
                    let y = self.conv(tape, h, expand)?;
                    let y = tape.relu(y)?;
                    let y = self.conv(tape, y, depthwise)?;
                    let y = tape.relu(y)?;
                    let y = self.conv(tape, y, project)?;
                    if *residual {
                        tape.add(y, h)?
                    } else {
                        y
                    }
                }
            };
        }
        tape.global_avg_pool(h)
    }

    /// Logits, `[N, num_classes]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = self.features(tape, x)?;
        for (i, d) in self.plan.head.iter().enumerate() {
            let (w, b) = (tape.param(d.w), tape.param(d.b));
            h = tape.dense(h, w, b)?;
            if i + 1 < self.plan.head.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Softmax probabilities for a preprocessed `[N, 3, S, S]` batch.
    pub fn predict_probs(&self, batch: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let x = tape.input(batch);
        let logits = self.forward(&mut tape, x)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs)?.clone())
    }
}

/// Stack `[3, S, S]` tensors into one `[N, 3, S, S]` batch.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape(), shape)));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_student() -> ModelConfig {
        ModelConfig { input_side: 16, width_multiplier: 0.5, hidden_units: 12, ..ModelConfig::student_default() }
    }

    fn tiny_teacher() -> ModelConfig {
        ModelConfig { input_side: 32, width_multiplier: 0.125, blocks_per_stage: 1, ..ModelConfig::teacher_default() }
    }

    fn batch(n: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = keyed_rng("batch", &[seed]);
        Tensor::new(vec![n, 3, side, side], (0..n * 3 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn teacher_head_is_single_dense_layer() {
        let cfg = ModelConfig { num_classes: 30, ..tiny_teacher() };
        let t = build_teacher(&cfg, 0).unwrap();
        assert_eq!(t.head_depth(), 1);
        assert_eq!(t.head_shape().last().unwrap().1, 30);
    }

    #[test]
    fn student_head_shapes() {
        let s = build_student(&ModelConfig::student_default(), 0).unwrap();
        assert_eq!(s.head_shape(), vec![(32, 128), (128, 10)]);
        let full = build_student(&ModelConfig { hidden_units: 1280, ..ModelConfig::student_default() }, 0).unwrap();
        assert_eq!(full.head_shape()[0].1, 1280);
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        assert!(build_teacher(&ModelConfig { num_classes: 1, ..tiny_teacher() }, 0).is_err());
        assert!(build_student(&ModelConfig { input_side: 6, ..tiny_student() }, 0).is_err());
        assert!(build_teacher(&ModelConfig { input_side: 16, ..tiny_teacher() }, 0).is_err());
    }

    #[test]
    fn builds_are_deterministic() {
        let a = build_student(&tiny_student(), 7).unwrap();
        let b = build_student(&tiny_student(), 7).unwrap();
        let c = build_student(&tiny_student(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn partition_and_boundary() {
        for m in [build_student(&tiny_student(), 1).unwrap(), build_teacher(&tiny_teacher(), 1).unwrap()] {
            let ps = m.params();
            let bb = ps.group(GroupName::Backbone).params.len();
            let hd = ps.group(GroupName::Head).params.len();
            assert_eq!(bb + hd, ps.len());
            assert!(ps.group(GroupName::Head).params.iter().all(|p| p.name.starts_with("fc")));
            assert!(ps.group(GroupName::Backbone).params.iter().all(|p| !p.name.starts_with("fc")));
            let mut names: Vec<_> = ps.iter().map(|(_, p)| p.name.clone()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), ps.len());
        }
    }

    #[test]
    fn probabilities_are_simplex_rows() {
        for m in [build_student(&tiny_student(), 2).unwrap(), build_teacher(&tiny_teacher(), 2).unwrap()] {
            let side = m.config().input_side;
            let p = m.predict_probs(batch(5, side, 3)).unwrap();
            assert_eq!(p.shape(), &[5, 10]);
            for r in 0..5 {
                let row = p.row(r);
                assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn wrong_input_side_is_an_error() {
        let m = build_student(&tiny_student(), 0).unwrap();
        assert!(m.predict_probs(batch(1, 24, 0)).is_err());
    }

    #[test]
    fn frozen_backbone_yields_head_gradients_only() {
        let mut m = build_student(&tiny_student(), 4).unwrap();
        m.params_mut().set_trainable_only(&[GroupName::Head]);
        let mut tape = Tape::new(m.params());
        let x = tape.input(batch(3, 16, 5));
        let logits = m.forward(&mut tape, x).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 1, 2]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.param_ids().all(|id| id.group == GroupName::Head));
        assert_eq!(g.len(), m.params().group(GroupName::Head).params.len());
    }

    #[test]
    fn default_geometries() {
        assert_eq!(Arch::Teacher.geometry(56), Geometry { resize: 64, crop: 56 });
        assert_eq!(Arch::Student.geometry(32), Geometry { resize: 40, crop: 32 });
        assert_eq!(Arch::Teacher.geometry(224), Geometry { resize: 256, crop: 224 });
        assert_eq!(Arch::Student.geometry(128), Geometry { resize: 160, crop: 128 });
    }
}
