use crate::error::{Error, Result};

use super::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Pretrained network weights.
    Base,
    /// Low-rank adapter factors (`down`/`up`).
    Adapter,
}

/// Which parameters receive gradients when a graph is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Base weights enter the graph as constants.
    AdaptersOnly,
    /// Inference: every parameter is a constant.
    Nothing,
}

impl Trainable {
    pub fn admits(self, kind: ParamKind) -> bool {
        match self {
            Trainable::All => true,
            Trainable::AdaptersOnly => kind == ParamKind::Adapter,
            Trainable::Nothing => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    kind: ParamKind,
    value: Tensor,
}

/// Named, ordered collection of model tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape("ParamSet::set", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn count_scalars(&self, kind: Option<ParamKind>) -> usize {
        self.entries
            .iter()
            .filter(|e| kind.is_none_or(|k| e.kind == k))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Order-sensitive FNV-1a hash over names and raw bits of the selected
    /// parameters. Bit-level equality is what the freezing contract needs.
    pub fn checksum(&self, kind: Option<ParamKind>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in self.entries.iter().filter(|e| kind.is_none_or(|k| e.kind == k)) {
            feed(e.name.as_bytes());
            for v in e.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies every tensor of `other` whose name exists here.
    pub fn load_matching(&mut self, other: &ParamSet) -> usize {
        let mut n = 0;
        for e in &other.entries {
            if let Some(id) = self.find(&e.name) {
                if self.entries[id.0].value.shape() == e.value.shape() {
                    self.entries[id.0].value = e.value.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

/// Per-parameter gradients produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn new(grads: Vec<Option<Tensor>>) -> Self {
        Gradients { grads }
    }

    pub fn empty(n: usize) -> Self {
        Gradients { grads: vec![None; n] }
    }

    /// `None` when the parameter was not a trainable leaf of the graph.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Adds `other` into `self`, for gradient accumulation across graphs.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = g {
                match slot {
                    Some(s) => s.add_assign(g),
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g = g.scale(c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn norm_of(&self, ids: impl Iterator<Item = ParamId>) -> f64 {
        ids.filter_map(|id| self.get(id))
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt()
    }
}
