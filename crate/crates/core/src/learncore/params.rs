use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{bit_identical, Scalar, Tensor};

/// The three parameter groups, each with its own update and sharing rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    /// Reconstruction network weights.
    Backbone,
    /// Hardware-conditioned prompt network, the only group FedHP shares.
    Prompt,
    /// Residual adaptors behind each normalisation layer; never leave a client.
    Adaptor,
}

impl GroupKind {
    pub const ALL: [GroupKind; 3] = [GroupKind::Backbone, GroupKind::Prompt, GroupKind::Adaptor];

    pub fn as_str(&self) -> &'static str {
        match self {
            GroupKind::Backbone => "backbone",
            GroupKind::Prompt => "prompt",
            GroupKind::Adaptor => "adaptor",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for GroupKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GroupKind::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown parameter group `{s}`")))
    }
}

/// Named tensors of one group. Frozen groups reject optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<T = f32> {
    kind: GroupKind,
    tensors: BTreeMap<String, Tensor<T>>,
    trainable: bool,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new(kind: GroupKind) -> Self {
        Self {
            kind,
            tensors: BTreeMap::new(),
            trainable: true,
        }
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!(
                "duplicate tensor `{name}` in group {}",
                self.kind
            )));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("group {} has no tensor `{name}`", self.kind)))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamGroup<U> {
        ParamGroup {
            kind: self.kind,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            trainable: self.trainable,
        }
    }

    /// Same names and shapes.
    pub fn same_layout<U: Scalar>(&self, other: &ParamGroup<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    /// Squared L2 distance to a same-layout group.
    pub fn sq_distance(&self, other: &ParamGroup<T>) -> Result<f64> {
        if !self.same_layout(other) {
            return Err(Error::invalid("parameter groups differ in layout"));
        }
        Ok(self
            .tensors
            .values()
            .zip(other.tensors.values())
            .map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x.f64() - y.f64()).powi(2))
                    .sum::<f64>()
            })
            .sum())
    }
}

impl ParamGroup<f32> {
    pub fn bit_identical(&self, other: &ParamGroup<f32>) -> bool {
        self.kind == other.kind
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && bit_identical(t1, t2))
    }
}

/// A model's parameter groups, at most one of each kind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    groups: BTreeMap<GroupKind, ParamGroup<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            groups: BTreeMap::new(),
        }
    }

    pub fn with(mut self, group: ParamGroup<T>) -> Self {
        self.groups.insert(group.kind(), group);
        self
    }

    pub fn insert(&mut self, group: ParamGroup<T>) {
        self.groups.insert(group.kind(), group);
    }

    pub fn get(&self, kind: GroupKind) -> Option<&ParamGroup<T>> {
        self.groups.get(&kind)
    }

    pub fn get_mut(&mut self, kind: GroupKind) -> Option<&mut ParamGroup<T>> {
        self.groups.get_mut(&kind)
    }

    pub fn require(&self, kind: GroupKind) -> Result<&ParamGroup<T>> {
        self.get(kind)
            .ok_or_else(|| Error::UnknownGroup(kind.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamGroup<T>> {
        self.groups.values()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            groups: self.groups.iter().map(|(k, g)| (*k, g.cast())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut g = ParamGroup::<f32>::new(GroupKind::Prompt);
        g.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(g.insert("w", Tensor::zeros(&[2])).is_err());
        assert_eq!(g.param_count(), 2);
        assert!(g.get("missing").is_err());
    }

    #[test]
    fn group_names_round_trip() {
        for g in GroupKind::ALL {
            assert_eq!(g.as_str().parse::<GroupKind>().unwrap(), g);
        }
        assert!("theta".parse::<GroupKind>().is_err());
    }
}
