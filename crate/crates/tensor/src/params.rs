//! Named parameter storage living outside the per-step graphs.

use crate::graph::{Graph, NodeId};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A flat, ordered set of named parameters. Each training step binds the set
/// into a fresh graph as leaves, and gradients are read back by position.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}: shape/data mismatch");
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate param name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Bind every parameter into `g`; `trainable` decides whether gradients
    /// flow (false binds constants, e.g. for inference or frozen nets).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.bind_where(g, |_| trainable)
    }

    /// Bind with a per-parameter trainability predicate (by name), used for
    /// freezing subsets such as an encoder.
    pub fn bind_where(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|e| {
                if trainable(&e.name) {
                    g.leaf(e.data.clone(), &e.shape)
                } else {
                    g.constant(e.data.clone(), &e.shape)
                }
            })
            .collect();
        Bound { ids }
    }

    /// FNV-1a over the raw bit patterns, for cheap bitwise-equality checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in &self.entries {
            for b in e.name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in &e.data {
                for byte in v.to_bits().to_le_bytes() {
                    h = (h ^ byte as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Checksum restricted to parameters matching a name predicate.
    pub fn checksum_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in self.entries.iter().filter(|e| pred(&e.name)) {
            for v in &e.data {
                for byte in v.to_bits().to_le_bytes() {
                    h = (h ^ byte as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Node ids of bound parameters, positionally aligned with the `ParamSet`.
pub struct Bound {
    pub ids: Vec<NodeId>,
}

impl Bound {
    pub fn id(&self, p: ParamId) -> NodeId {
        self.ids[p.0]
    }
}
