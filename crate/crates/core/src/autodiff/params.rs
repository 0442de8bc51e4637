use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// A parameter's address: the namespace of its [`ParamStore`] plus its index
/// there. Namespaces keep ids from different models apart on a shared tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub space: u16,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors owned by one model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    space: u16,
    entries: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Empty store whose ids carry namespace `space`.
    pub fn with_space(space: u16) -> Self {
        Self {
            space,
            entries: Vec::new(),
        }
    }

    pub fn space(&self) -> u16 {
        self.space
    }

    fn id(&self, index: usize) -> ParamId {
        ParamId {
            space: self.space,
            index,
        }
    }

    fn slot(&self, id: ParamId) -> usize {
        assert_eq!(id.space, self.space, "parameter id from another store");
        id.index
    }

    /// Whether `id` belongs to this store.
    pub fn owns(&self, id: ParamId) -> bool {
        id.space == self.space && id.index < self.entries.len()
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Parameter {
            name,
            value,
            trainable: true,
        });
        self.id(self.entries.len() - 1)
    }

    /// Glorot-uniform weight matrix `[fan_in, fan_out]`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, values))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[self.slot(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        let i = self.slot(id);
        &mut self.entries[i]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[self.slot(id)].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(|i| self.id(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(|i| self.id(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.entries.iter().enumerate().map(|(i, p)| (self.id(i), p))
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.entries {
            p.trainable = trainable;
        }
    }

    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.value.len())
            .sum()
    }

    /// Overwrites every value with zero; used to build the degenerate
    /// "zero-initialized" models the contracts refer to.
    pub fn zero_all(&mut self) {
        for p in &mut self.entries {
            p.value.values_mut().fill(0.0);
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.entries {
            hasher.update((p.name.len() as u64).to_le_bytes());
            hasher.update(p.name.as_bytes());
            for d in p.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.value.values() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "parameter count {} != {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
            dst.trainable = src.trainable;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let id = store.add_glorot("w", 10, 6, &mut rng);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(store.value(id).values().iter().all(|v| v.abs() <= bound));
        assert_eq!(store.value(id).shape(), &[10, 6]);
    }

    #[test]
    fn fingerprint_sees_single_bit() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![1.0, 2.0]));
        let before = store.fingerprint();
        let v = &mut store.get_mut(id).value.values_mut()[1];
        *v = f64::from_bits(v.to_bits() + 1);
        assert_ne!(before, store.fingerprint());
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0));
        store.add("w", Tensor::scalar(0.0));
    }
}
