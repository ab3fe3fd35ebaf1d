use rand::{Rng, RngCore};
use std::collections::HashMap;

use super::Precision;

/// Index of a parameter in a [`Params`] store.
pub type ParamId = usize;

/// Initialization scheme for a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `[-0.05, 0.05]`; used for embedding tables.
    Embedding,
    /// Scaled uniform with bound `sqrt(6 / (fan_in + fan_out))`, fans taken
    /// from the last two extents (a vector counts as fan_in only).
    Glorot,
    Zeros,
    Const(f64),
}

pub(crate) struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub frozen: bool,
}

/// Named, mutable model parameters. Graphs copy values in as leaves, so a
/// store is only ever mutated by its owning trainer.
pub struct Params {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
    precision: Precision,
}

impl Params {
    pub fn new(precision: Precision) -> Self {
        Params { entries: Vec::new(), by_name: HashMap::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Register a parameter. Names are unique; shapes are fixed for life.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut dyn RngCore) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let n: usize = shape.iter().product();
        let mut values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Embedding => (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect(),
            Init::Glorot => {
                let (fan_in, fan_out) = match shape {
                    [n] => (*n, 1),
                    [.., o, i] => (*i, *o),
                    [] => (1, 1),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        for v in values.iter_mut() {
            *v = self.precision.store(*v);
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            frozen: false,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Register a parameter with explicit values (tests, fixtures).
    pub fn add_const(&mut self, name: &str, shape: &[usize], values: &[f64]) -> ParamId {
        let n: usize = shape.iter().product();
        assert_eq!(n.max(1), values.len(), "shape/value count mismatch");
        assert!(!self.by_name.contains_key(name), "duplicate parameter name '{name}'");
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values: values.iter().map(|v| self.precision.store(*v)).collect(),
            frozen: false,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub(crate) fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id].shape
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id].values
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.entries.len()
    }

    /// Overwrite a parameter's values, rounding per the store precision.
    pub fn set(&mut self, id: ParamId, values: &[f64]) {
        let entry = &mut self.entries[id];
        assert_eq!(entry.values.len(), values.len(), "set: length mismatch");
        for (dst, src) in entry.values.iter_mut().zip(values) {
            *dst = self.precision.store(*src);
        }
    }

    /// Add `delta * scale` in place, rounding per the store precision.
    pub fn axpy(&mut self, id: ParamId, scale: f64, delta: &[f64]) {
        let entry = &mut self.entries[id];
        assert_eq!(entry.values.len(), delta.len(), "axpy: length mismatch");
        for (dst, d) in entry.values.iter_mut().zip(delta) {
            *dst = self.precision.store(*dst + scale * d);
        }
    }

    pub(crate) fn values_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.entries[id].values
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id].frozen
    }

    /// Freeze every parameter whose name starts with `prefix`. Frozen
    /// parameters receive no gradient and are skipped by optimizers.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut count = 0;
        for e in self.entries.iter_mut() {
            if e.name.starts_with(prefix) {
                e.frozen = true;
                count += 1;
            }
        }
        count
    }

    pub fn unfreeze_all(&mut self) {
        for e in self.entries.iter_mut() {
            e.frozen = false;
        }
    }

    /// Order-sensitive bitwise digest of all values; two stores with equal
    /// checksums hold bitwise-identical parameters in the same order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in &self.entries {
            for b in e.name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in &e.values {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Total number of stored values.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new(Precision::Double);
        let id = p.add("w", &[8, 16], Init::Glorot, &mut rng);
        let bound = (6.0 / 24.0f64).sqrt();
        assert!(p.values(id).iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn freeze_prefix_marks_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new(Precision::Double);
        let a = p.add("encoder/w", &[2], Init::Zeros, &mut rng);
        let b = p.add("head/w", &[2], Init::Zeros, &mut rng);
        assert_eq!(p.freeze_prefix("encoder/"), 1);
        assert!(p.is_frozen(a));
        assert!(!p.is_frozen(b));
    }

    #[test]
    fn checksum_tracks_values() {
        let mut p = Params::new(Precision::Double);
        let id = p.add_const("w", &[2], &[1.0, 2.0]);
        let before = p.checksum();
        p.axpy(id, 1.0, &[0.0, 0.0]);
        assert_eq!(p.checksum(), before);
        p.axpy(id, 1.0, &[1e-9, 0.0]);
        assert_ne!(p.checksum(), before);
    }

    #[test]
    fn single_precision_storage_rounds() {
        let mut p = Params::new(Precision::Single);
        let id = p.add_const("w", &[1], &[1.0 / 3.0]);
        assert_eq!(p.values(id)[0], (1.0f64 / 3.0) as f32 as f64);
    }
}
