use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DiffError, NdArray};

/// Handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: NdArray,
    pub trainable: bool,
}

/// Named registry of leaf arrays. Registration order is stable and defines `ParamId`s.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    #[serde(skip)]
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: NdArray) -> Result<ParamId, DiffError> {
        self.insert(name.into(), value, true)
    }

    /// Registers a leaf that participates in graphs but never receives updates.
    pub fn register_frozen(&mut self, name: impl Into<String>, value: NdArray) -> Result<ParamId, DiffError> {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: NdArray, trainable: bool) -> Result<ParamId, DiffError> {
        if self.by_name.contains_key(&name) {
            return Err(DiffError::Invalid {
                op: "register",
                msg: format!("parameter `{name}` registered twice"),
            });
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(ParamId(id))
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

    pub fn get(&self, id: ParamId) -> &NdArray {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Total number of scalar values across trainable parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Rebuilds the name index; needed after deserialization.
    pub fn reindex(&mut self) {
        self.by_name = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    /// Copies values from `other`, which must hold the same names and shapes in the same order.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), DiffError> {
        if other.entries.len() != self.entries.len() {
            return Err(DiffError::Invalid {
                op: "load_values",
                msg: format!("expected {} parameters, found {}", self.entries.len(), other.entries.len()),
            });
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(DiffError::Invalid {
                    op: "load_values",
                    msg: format!(
                        "parameter `{}` {:?} does not match `{}` {:?}",
                        mine.name,
                        mine.value.shape(),
                        theirs.name,
                        theirs.value.shape()
                    ),
                });
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients, shape-congruent with the owning [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    grads: Vec<NdArray>,
}

impl GradientMap {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            grads: store.entries.iter().map(|e| NdArray::zeros(e.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &NdArray {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NdArray)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn accumulate(&mut self, other: &GradientMap) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(NdArray::is_finite)
    }
}
