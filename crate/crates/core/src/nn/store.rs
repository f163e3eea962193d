//! Named parameter storage. Entries keep a fixed registration order so every
//! downstream iteration (tape leaves, optimizer state, checkpoint layout) is
//! deterministic. Freezing is per-entry and enforced both at mutation time
//! and structurally: frozen entries enter the tape as constants, so no
//! gradient can ever reach them.

use crate::error::{Error, Result};
use crate::tensor::{Array, Scalar, Tape, Var};

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct Entry<T> {
    name: String,
    value: Array<T>,
    frozen: bool,
}

/// Ordered, named parameter collection for one model artifact.
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Register a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(Entry { name, value, frozen: false });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array<T> {
        &self.entries[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    /// Replace a parameter's value; rejected for frozen entries and on shape
    /// mismatch.
    pub fn set(&mut self, name: &str, value: Array<T>) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if entry.frozen {
            return Err(Error::Frozen(format!("parameter {name:?} is frozen")));
        }
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{name:?}: {:?} vs {:?}", entry.value.shape(), value.shape()),
            ));
        }
        entry.value = value;
        Ok(())
    }

    /// Freeze every parameter whose name starts with `prefix`; returns how
    /// many entries were affected.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut() {
            if e.name.starts_with(prefix) && !e.frozen {
                e.frozen = true;
                n += 1;
            }
        }
        n
    }

    /// Freeze the whole store.
    pub fn freeze_all(&mut self) {
        for e in self.entries.iter_mut() {
            e.frozen = true;
        }
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.frozen)
    }

    /// True if every entry is frozen.
    pub fn all_frozen(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.frozen)
    }

    /// Iterate `(name, value)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Record every parameter on a tape, in registration order. Frozen
    /// entries become constants (structurally gradient-free), trainable ones
    /// become leaves. The returned vars align with entry indices.
    pub fn leaf_all(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                if e.frozen {
                    tape.constant(e.value.clone())
                } else {
                    tape.leaf(e.value.clone())
                }
            })
            .collect()
    }

    /// Indices of trainable (unfrozen) entries, in registration order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.frozen)
            .map(|(i, _)| i)
            .collect()
    }

    /// Mutable references to trainable parameter arrays, aligned with
    /// [`ParamStore::trainable_indices`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Array<T>> {
        self.entries.iter_mut().filter(|e| !e.frozen).map(|e| &mut e.value).collect()
    }

    /// Copy values from another store by matching names (shapes must agree).
    /// Used to initialize one model from another; freeze flags are not
    /// copied. Returns the number of parameters copied.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut n = 0;
        for e in self.entries.iter_mut() {
            if let Some(src) = other.get(&e.name) {
                if src.shape() != e.value.shape() {
                    return Err(Error::shape(
                        "copy_values_from",
                        format!("{:?}: {:?} vs {:?}", e.name, e.value.shape(), src.shape()),
                    ));
                }
                e.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// Clone the store into another scalar type (used for f64 grad checks).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), frozen: e.frozen })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add("a.w", Array::zeros(&[2])).unwrap();
        assert!(s.add("a.w", Array::zeros(&[2])).is_err());
    }

    #[test]
    fn freeze_prefix_blocks_updates_and_grads() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add("enc.w", Array::zeros(&[2])).unwrap();
        s.add("dec.w", Array::zeros(&[2])).unwrap();
        assert_eq!(s.freeze_prefix("enc."), 1);
        let err = s.set("enc.w", Array::full(&[2], 1.0)).unwrap_err();
        assert!(matches!(err, Error::Frozen(_)));
        s.set("dec.w", Array::full(&[2], 1.0)).unwrap();

        let mut tape = Tape::new();
        let vars = s.leaf_all(&mut tape);
        let sum0 = tape.sum_all(vars[0]).unwrap();
        let sum1 = tape.sum_all(vars[1]).unwrap();
        let loss = tape.add(sum0, sum1).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(vars[0]).is_none(), "frozen param must receive no gradient");
        assert!(tape.grad(vars[1]).is_some());
        assert_eq!(s.trainable_indices(), vec![1]);
    }

    #[test]
    fn param_count_sums_elements() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add("w", Array::zeros(&[3, 4])).unwrap();
        s.add("b", Array::zeros(&[4])).unwrap();
        assert_eq!(s.param_count(), 16);
    }
}
