//! Named parameter storage, the builder used to register parameters while a
//! network is constructed, and the per-pass [`Session`] that loads them into a
//! graph.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::rng::SeededRng;
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which sub-network owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    SpatialEncoder,
    SpatialDecoder,
    TemporalEncoder,
    TemporalDecoder,
    Text,
    Discriminator,
}

impl Group {
    const fn bit(self) -> u8 {
        1 << self as u8
    }
}

/// Small set of [`Group`]s.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const NONE: GroupSet = GroupSet(0);
    pub const GENERATOR: GroupSet = GroupSet(
        Group::SpatialEncoder.bit()
            | Group::SpatialDecoder.bit()
            | Group::TemporalEncoder.bit()
            | Group::TemporalDecoder.bit()
            | Group::Text.bit(),
    );
    pub const SPATIAL: GroupSet = GroupSet(Group::SpatialEncoder.bit() | Group::SpatialDecoder.bit() | Group::Text.bit());
    pub const TEMPORAL_AE: GroupSet = GroupSet(Group::TemporalEncoder.bit() | Group::TemporalDecoder.bit());
    pub const DISCRIMINATOR: GroupSet = GroupSet(Group::Discriminator.bit());

    pub const fn of(groups: &[Group]) -> Self {
        let mut bits = 0;
        let mut i = 0;
        while i < groups.len() {
            bits |= groups[i].bit();
            i += 1;
        }
        GroupSet(bits)
    }

    pub const fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub const fn union(self, other: GroupSet) -> Self {
        GroupSet(self.0 | other.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    /// Dot-separated hierarchical name, e.g. `e1.levels.0.blocks.0.temporal_conv.weight`.
    pub name: String,
    pub group: Group,
    /// Belongs to a temporal convolution, temporal attention or the temporal autoencoder.
    pub temporal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    infos: Vec<ParamInfo>,
    values: Vec<Tensor<F>>,
    index: BTreeMap<String, ParamId>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { infos: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, info: ParamInfo, value: Tensor<F>) -> Result<ParamId> {
        if self.index.contains_key(&info.name) {
            return Err(Error::invalid(format!("duplicate parameter name `{}`", info.name)));
        }
        let id = ParamId(self.values.len());
        self.index.insert(info.name.clone(), id);
        self.infos.push(info);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamInfo, &Tensor<F>)> {
        self.infos.iter().zip(&self.values).enumerate().map(|(i, (info, v))| (ParamId(i), info, v))
    }

    /// Total scalar count of parameters whose group is in `groups`.
    pub fn count(&self, groups: GroupSet) -> usize {
        self.iter().filter(|(_, i, _)| groups.contains(i.group)).map(|(_, _, v)| v.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore { infos: self.infos.clone(), values: self.values.iter().map(|v| v.cast()).collect(), index: self.index.clone() }
    }

    /// Replaces the tensor for `name`, keeping its shape contract.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Registers parameters under a name prefix while a network is being built.
pub struct Builder<'a, F> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut SeededRng,
    prefix: String,
    group: Group,
    temporal: bool,
}

impl<'a, F: Real> Builder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut SeededRng, prefix: &str, group: Group) -> Self {
        Builder { store, rng, prefix: prefix.to_string(), group, temporal: false }
    }

    /// Child scope `prefix.name`.
    pub fn push(&mut self, name: impl core::fmt::Display) -> Builder<'_, F> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Builder { store: self.store, rng: self.rng, prefix, group: self.group, temporal: self.temporal }
    }

    /// Same scope, but everything registered through it is tagged temporal.
    pub fn temporal(&mut self) -> Builder<'_, F> {
        Builder { store: self.store, rng: self.rng, prefix: self.prefix.clone(), group: self.group, temporal: true }
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        self.rng
    }

    /// Same scope drawing from an independent stream keyed by the scope name,
    /// so optional sub-networks do not shift the initialization of the rest.
    pub fn isolated<'b>(&'b mut self, rng: &'b mut SeededRng) -> Builder<'b, F> {
        *rng = self.rng.fork(fnv1a(self.prefix.as_bytes()));
        Builder { store: self.store, rng, prefix: self.prefix.clone(), group: self.group, temporal: self.temporal }
    }

    pub fn param(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.insert(ParamInfo { name: full, group: self.group, temporal: self.temporal }, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, Tensor::full(shape, F::one()))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let t = self.rng.uniform_tensor(shape, bound);
        self.param(name, t)
    }
}

/// One forward pass: a fresh graph plus lazy, cached parameter loading.
///
/// Parameters whose group is in `trainable` enter the graph as gradient
/// leaves; all others enter as constants.
pub struct Session<'s, F: Real> {
    pub graph: Graph<F>,
    store: &'s ParamStore<F>,
    loaded: Vec<Option<Var>>,
    trainable: GroupSet,
}

impl<'s, F: Real> Session<'s, F> {
    pub fn new(store: &'s ParamStore<F>, trainable: GroupSet) -> Self {
        Session { graph: Graph::new(), store, loaded: alloc::vec![None; store.len()], trainable }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.loaded[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.trainable.contains(self.store.info(id).group) {
            self.graph.param(id, value)
        } else {
            self.graph.constant(value)
        };
        self.loaded[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.graph.value(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.graph.shape(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_prefixes_and_tags() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SeededRng::new(0);
        let mut b = Builder::new(&mut store, &mut rng, "e1", Group::SpatialEncoder);
        {
            let mut blocks = b.push("blocks");
            let mut blk = blocks.push(0);
            blk.zeros("w", &[2]).unwrap();
            blk.temporal().zeros("tw", &[3]).unwrap();
        }
        assert!(store.id("e1.blocks.0.w").is_some());
        let tid = store.id("e1.blocks.0.tw").unwrap();
        assert!(store.info(tid).temporal);
        assert_eq!(store.count(GroupSet::GENERATOR), 5);
        assert_eq!(store.count(GroupSet::DISCRIMINATOR), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SeededRng::new(0);
        let mut b = Builder::new(&mut store, &mut rng, "x", Group::Text);
        b.zeros("a", &[1]).unwrap();
        assert!(b.zeros("a", &[1]).is_err());
    }
}
