use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nncore::Tensor;

/// The two parameter groups a model is partitioned into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupName {
    Backbone,
    Head,
}

impl GroupName {
    pub const ALL: [GroupName; 2] = [GroupName::Backbone, GroupName::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupName::Backbone => "backbone",
            GroupName::Head => "head",
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            GroupName::Backbone => 0,
            GroupName::Head => 1,
        }
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "backbone" => Ok(GroupName::Backbone),
            "head" => Ok(GroupName::Head),
            other => Err(Error::InvalidArgument(format!("unknown parameter group `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// A named set of parameters that is frozen or trained as a unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: GroupName,
    pub trainable: bool,
    pub params: Vec<NamedTensor>,
}

/// Handle to one parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub group: GroupName,
    pub index: usize,
}

/// All parameters of a model, partitioned into `backbone` and `head`.
///
/// The partition is structural: a parameter is registered into exactly one
/// group and can never move.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    groups: [ParamGroup; 2],
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        let group = |name| ParamGroup { name, trainable: true, params: Vec::new() };
        Self { groups: [group(GroupName::Backbone), group(GroupName::Head)] }
    }

    pub fn register(&mut self, group: GroupName, name: impl Into<String>, value: Tensor) -> ParamId {
        let g = &mut self.groups[group.index()];
        g.params.push(NamedTensor { name: name.into(), value });
        ParamId { group, index: g.params.len() - 1 }
    }

    pub fn group(&self, name: GroupName) -> &ParamGroup {
        &self.groups[name.index()]
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn get(&self, id: ParamId) -> &NamedTensor {
        &self.groups[id.group.index()].params[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NamedTensor {
        &mut self.groups[id.group.index()].params[id.index]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.groups[id.group.index()].trainable
    }

    pub fn set_trainable(&mut self, group: GroupName, trainable: bool) {
        self.groups[group.index()].trainable = trainable;
    }

    /// Make exactly the listed groups trainable.
    pub fn set_trainable_only(&mut self, groups: &[GroupName]) {
        for g in GroupName::ALL {
            self.set_trainable(g, groups.contains(&g));
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.groups.iter().flat_map(|g| {
            (0..g.params.len()).map(move |index| ParamId { group: g.name, index })
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NamedTensor)> + '_ {
        self.ids().map(move |id| (id, self.get(id)))
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.params.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scalar_count(&self) -> usize {
        self.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    /// FNV-1a over the raw bits of every value in `group`, in registration order.
    pub fn checksum(&self, group: GroupName) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.group(group).params {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_partitions_parameters() {
        let mut ps = ParamSet::new();
        let a = ps.register(GroupName::Backbone, "conv.w", Tensor::zeros(&[2, 2]));
        let b = ps.register(GroupName::Head, "fc.w", Tensor::zeros(&[3]));
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.get(a).name, "conv.w");
        assert_eq!(ps.get(b).name, "fc.w");
        assert_eq!(ps.group(GroupName::Backbone).params.len(), 1);
        assert_eq!(ps.group(GroupName::Head).params.len(), 1);
        assert_eq!(ps.scalar_count(), 7);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut ps = ParamSet::new();
        let a = ps.register(GroupName::Backbone, "w", Tensor::zeros(&[4]));
        let before = ps.checksum(GroupName::Backbone);
        let head = ps.checksum(GroupName::Head);
        ps.get_mut(a).value.data_mut()[2] = 1.0;
        assert_ne!(before, ps.checksum(GroupName::Backbone));
        assert_eq!(head, ps.checksum(GroupName::Head));
    }

    #[test]
    fn group_names_parse() {
        assert_eq!("head".parse::<GroupName>().unwrap(), GroupName::Head);
        assert!("neck".parse::<GroupName>().is_err());
    }
}
