//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "CYCLETCK"
//! version          u32      1
//! arch             u8       0 = teacher, 1 = student
//! num_classes      u32
//! input_side       u32
//! width_multiplier f64
//! hidden_units     u32
//! blocks_per_stage u32
//! param_count      u32
//! param_count records:
//!   name_len u16, name (UTF-8), group u8 (0 = backbone, 1 = head),
//!   rank u8, rank × u32 dims, product(dims) × f32 values
//! ```
//!
//! Loading rebuilds the network from the stored config and then overwrites
//! every parameter, so names, groups and shapes must match the layer plan.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{build, Arch, Model, ModelConfig};
use crate::nncore::{GroupName, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CYCLETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match model.arch() {
        Arch::Teacher => 0,
        Arch::Student => 1,
    });
    let c = model.config();
    for v in [c.num_classes, c.input_side] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.width_multiplier.to_le_bytes());
    for v in [c.hidden_units, c.blocks_per_stage, model.params().len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (id, p) in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(id.group as u8);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format!("truncated at byte {} (wanted {n} more)", self.pos)
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> std::result::Result<Model, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let arch = match r.u8()? {
        0 => Arch::Teacher,
        1 => Arch::Student,
        other => return Err(format!("unknown arch tag {other}")),
    };
    let num_classes = r.u32()? as usize;
    let input_side = r.u32()? as usize;
    let width_multiplier = r.f64()?;
    let hidden_units = r.u32()? as usize;
    let blocks_per_stage = r.u32()? as usize;
    let config = ModelConfig { num_classes, input_side, width_multiplier, hidden_units, blocks_per_stage };
    let mut model = build(arch, &config, 0).map_err(|e| e.to_string())?;

    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(format!("{count} parameters stored, layer plan has {}", model.params().len()));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| "parameter name is not UTF-8".to_string())?;
        let group = match r.u8()? {
            0 => GroupName::Backbone,
            1 => GroupName::Head,
            other => return Err(format!("unknown group tag {other} for `{name}`")),
        };
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let slot = model.params_mut().get_mut(id);
        if slot.name != name || id.group != group || slot.value.shape() != shape.as_slice() {
            return Err(format!(
                "record `{name}` ({group}, {shape:?}) does not match `{}` ({}, {:?})",
                slot.name,
                id.group,
                slot.value.shape()
            ));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        slot.value = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes).map_err(|msg| Error::Checkpoint { path: path.to_path_buf(), msg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_student, build_teacher};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig { input_side: 16, width_multiplier: 0.5, hidden_units: 9, ..ModelConfig::student_default() };
        let mut m = build_student(&cfg, 11).unwrap();
        // include values that compare equal but differ in bits
        let id = m.params().find("fc2.b").unwrap();
        m.params_mut().get_mut(id).value.data_mut()[0] = -0.0;
        m.params_mut().get_mut(id).value.data_mut()[1] = f32::MIN_POSITIVE / 2.0;
        let bytes = write_checkpoint(&m);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(write_checkpoint(&back), bytes);
        for ((_, a), (_, b)) in m.params().iter().zip(back.params().iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn teacher_round_trip() {
        let cfg = ModelConfig { input_side: 32, width_multiplier: 0.125, blocks_per_stage: 1, ..ModelConfig::teacher_default() };
        let m = build_teacher(&cfg, 3).unwrap();
        let back = read_checkpoint(&write_checkpoint(&m)).unwrap();
        assert_eq!(back.arch(), Arch::Teacher);
        assert_eq!(back.params(), m.params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = ModelConfig { input_side: 16, width_multiplier: 0.5, hidden_units: 9, ..ModelConfig::student_default() };
        let bytes = write_checkpoint(&build_student(&cfg, 0).unwrap());
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(read_checkpoint(&magic).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(read_checkpoint(&version).unwrap_err().contains("version"));
    }
}
