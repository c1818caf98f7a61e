//! Named parameters, group tags, freezing and weight snapshots.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which part of the layered model a parameter belongs to.
///
/// Layer and probe indices are 1-based. The probe attached to the top layer is
/// the main classifier and is tagged [`Group::MainClassifier`], not `Probe(L)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Embeddings,
    Backbone(usize),
    Probe(usize),
    MainClassifier,
}

impl Group {
    /// True for the groups that make up the main network: embeddings, every
    /// encoder layer and the main classifier.
    pub fn is_main_network(self) -> bool {
        !matches!(self, Group::Probe(_))
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Embeddings => write!(f, "embeddings"),
            Group::Backbone(i) => write!(f, "backbone-layer-{i}"),
            Group::Probe(i) => write!(f, "probe-{i}"),
            Group::MainClassifier => write!(f, "main-classifier"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        value.ensure_finite(&name)?;
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            value,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn groups(&self) -> Vec<Group> {
        let mut gs: Vec<Group> = self.params.iter().map(|p| p.group).collect();
        gs.sort();
        gs.dedup();
        gs
    }

    /// Sets `trainable = false` on every member of `group` and touches nothing else.
    pub fn freeze_group(&mut self, group: Group) {
        self.set_group_trainable(group, false);
    }

    pub fn unfreeze_group(&mut self, group: Group) {
        self.set_group_trainable(group, true);
    }

    fn set_group_trainable(&mut self, group: Group, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
        }
    }

    /// Makes exactly the parameters whose group satisfies `keep` trainable.
    pub fn train_only(&mut self, keep: impl Fn(Group) -> bool) {
        for p in &mut self.params {
            p.trainable = keep(p.group);
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.train_only(|_| true);
    }

    /// Order-sensitive hash over the bit patterns of every parameter in `group`.
    pub fn group_fingerprint(&self, group: Group) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            p.name.hash(&mut h);
            p.value.fingerprint().hash(&mut h);
        }
        h.finish()
    }

    pub fn fingerprints(&self) -> Vec<(Group, u64)> {
        self.groups()
            .into_iter()
            .map(|g| (g, self.group_fingerprint(g)))
            .collect()
    }

    pub fn snapshot(&self, init_seed: u64) -> WeightSnapshot {
        WeightSnapshot {
            init_seed,
            tensors: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Copies every tensor of `snapshot` back in place. Trainable flags are left alone.
    pub fn restore(&mut self, snapshot: &WeightSnapshot) -> Result<()> {
        if snapshot.tensors.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "snapshot holds {} tensors, model has {}",
                snapshot.tensors.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter().zip(&snapshot.tensors) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Invalid(format!(
                    "snapshot entry `{name}` {:?} does not match parameter `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(&snapshot.tensors) {
            p.value.clone_from(t);
        }
        Ok(())
    }

    /// True when every tensor is bit-identical to the snapshot.
    pub fn matches_snapshot(&self, snapshot: &WeightSnapshot) -> bool {
        self.params.len() == snapshot.tensors.len()
            && self
                .params
                .iter()
                .zip(&snapshot.tensors)
                .all(|(p, (n, t))| &p.name == n && p.value.bitwise_eq(t))
    }

    pub(crate) fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn from_params(params: Vec<Param>) -> Result<Self> {
        let mut set = ParameterSet::new();
        for p in params {
            let id = set.add(p.name, p.group, p.value)?;
            set.params[id.0].trainable = p.trainable;
        }
        Ok(set)
    }
}

/// Deep copy of every parameter tensor, plus the seed that produced the
/// initial weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSnapshot {
    pub init_seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}
