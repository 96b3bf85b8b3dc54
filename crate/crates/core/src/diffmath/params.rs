//! Named flat parameter arrays with paired gradient buffers.

use std::collections::HashMap;

use crate::{Error, Result};

/// Index of an entry in a [`ParamStore`]. Stable for the store's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EntryId(pub(crate) usize);

impl EntryId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named trainable array: values, a same-length gradient buffer, a
/// shape whose product equals the length, and a per-entry learning rate.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    /// Learning rate for this entry (grids train much faster than MLPs).
    pub lr: f64,
    /// Frozen entries are skipped by the optimizer and by gradient sinks.
    pub frozen: bool,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The optimization substrate: every trainable scalar in the repository
/// lives in exactly one store entry.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new entry. Rejects duplicate names and shape/length
    /// mismatches.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<f64>,
        lr: f64,
    ) -> Result<EntryId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateEntry(name));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                name,
                detail: format!("shape {shape:?} does not match {} values", values.len()),
            });
        }
        let id = EntryId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        let grads = vec![0.0; values.len()];
        self.entries.push(ParamEntry { name, shape, values, grads, lr, frozen: false });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<EntryId> {
        self.index
            .get(name)
            .map(|&i| EntryId(i))
            .ok_or_else(|| Error::UnknownEntry(name.to_string()))
    }

    pub fn entry(&self, id: EntryId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: EntryId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn values(&self, id: EntryId) -> &[f64] {
        &self.entries[id.0].values
    }

    pub fn grads(&self, id: EntryId) -> &[f64] {
        &self.entries[id.0].grads
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (EntryId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (EntryId(i), e))
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grads.fill(0.0);
        }
    }

    pub fn set_frozen(&mut self, id: EntryId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freeze every entry whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in self.entries.iter_mut() {
            if e.name.starts_with(prefix) {
                e.frozen = true;
            }
        }
    }

    /// Replace an entry's values and shape in place (used by progressive
    /// grid scaling). Gradients reset to zero; optimizer state for the
    /// entry must be reset by the caller.
    pub fn replace_values(&mut self, id: EntryId, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch {
                name: self.entries[id.0].name.clone(),
                detail: format!("shape {shape:?} does not match {} values", values.len()),
            });
        }
        let e = &mut self.entries[id.0];
        e.grads = vec![0.0; values.len()];
        e.values = values;
        e.shape = shape;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut store = ParamStore::new();
        let id = store.register("w", vec![2, 3], vec![0.0; 6], 1e-3).unwrap();
        assert_eq!(store.id("w").unwrap(), id);
        assert_eq!(store.entry(id).shape, vec![2, 3]);
        assert_eq!(store.values(id).len(), store.grads(id).len());
    }

    #[test]
    fn rejects_duplicates_and_bad_shapes() {
        let mut store = ParamStore::new();
        store.register("w", vec![4], vec![0.0; 4], 1e-3).unwrap();
        assert!(matches!(
            store.register("w", vec![4], vec![0.0; 4], 1e-3),
            Err(Error::DuplicateEntry(_))
        ));
        assert!(matches!(
            store.register("v", vec![3], vec![0.0; 4], 1e-3),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(store.id("nope").is_err());
    }
}
