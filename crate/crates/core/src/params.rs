//! Parameter bookkeeping: shape specs (so trainable counts are pure shape
//! calculus, no allocation), materialization with seeded init, and
//! checksumming of frozen weights.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{numel_of, Elem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Kaiming normal: N(0, sqrt(2 / fan_in)).
    KaimingNormal { fan_in: usize },
    /// N(0, std); used for positional embeddings.
    Normal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], trainable: bool, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            trainable,
            init,
        }
    }

    pub fn numel(&self) -> u64 {
        numel_of(&self.shape) as u64
    }
}

pub fn count_trainable(specs: &[ParamSpec]) -> u64 {
    specs.iter().filter(|s| s.trainable).map(|s| s.numel()).sum()
}

pub fn count_frozen(specs: &[ParamSpec]) -> u64 {
    specs.iter().filter(|s| !s.trainable).map(|s| s.numel()).sum()
}

/// An ordered, named set of tensors materialized from specs. Order is the
/// spec order and is part of the checkpoint/checksum contract.
pub struct ParamSet<E: Elem> {
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Elem> ParamSet<E> {
    pub fn materialize(specs: &[ParamSpec], rng: &mut SeedRng) -> Self {
        let entries = specs
            .iter()
            .map(|s| {
                let n = numel_of(&s.shape);
                let data: Vec<E> = match s.init {
                    Init::KaimingNormal { fan_in } => {
                        let std = (2.0 / fan_in as f64).sqrt();
                        (0..n)
                            .map(|_| {
                                let z: E = E::standard_normal(rng);
                                z * E::from_f64(std)
                            })
                            .collect()
                    }
                    Init::Normal { std } => (0..n)
                        .map(|_| {
                            let z: E = E::standard_normal(rng);
                            z * E::from_f64(std)
                        })
                        .collect(),
                    Init::Zeros => vec![E::zero(); n],
                    Init::Ones => vec![E::one(); n],
                };
                let t = Tensor::from_vec(data, &s.shape).expect("spec shape is consistent");
                t.set_requires_grad(s.trainable);
                (s.name.clone(), t)
            })
            .collect();
        ParamSet { entries }
    }

    pub fn get(&self, name: &str) -> &Tensor<E> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> u64 {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    pub fn frozen_count(&self) -> u64 {
        self.entries
            .iter()
            .filter(|(_, t)| !t.requires_grad())
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    pub fn freeze_all(&self) {
        for (_, t) in &self.entries {
            t.set_requires_grad(false);
        }
    }

    pub fn fill_from(&self, name: &str, data: &[E]) -> Result<()> {
        let t = self.try_get(name).ok_or_else(|| {
            Error::Checkpoint(format!("parameter {name} not present in model"))
        })?;
        if t.numel() != data.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: {} values for shape {:?}",
                data.len(),
                t.shape()
            )));
        }
        t.with_data_mut(|d| d.copy_from_slice(data));
        Ok(())
    }
}

impl ParamSet<f32> {
    /// SHA-256 over (name, shape, f32 LE payload) of every entry in order.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &v in t.data().iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("w", &[4, 3], true, Init::KaimingNormal { fan_in: 3 }),
            ParamSpec::new("b", &[4], true, Init::Zeros),
            ParamSpec::new("frozen", &[2, 2], false, Init::Ones),
        ]
    }

    #[test]
    fn counts_split_by_trainability() {
        let s = specs();
        assert_eq!(count_trainable(&s), 16);
        assert_eq!(count_frozen(&s), 4);
        let set: ParamSet<f32> = ParamSet::materialize(&s, &mut rng_from(1));
        assert_eq!(set.trainable_count(), 16);
        assert_eq!(set.frozen_count(), 4);
    }

    #[test]
    fn materialization_is_seed_deterministic() {
        let s = specs();
        let a: ParamSet<f32> = ParamSet::materialize(&s, &mut rng_from(5));
        let b: ParamSet<f32> = ParamSet::materialize(&s, &mut rng_from(5));
        assert_eq!(a.checksum(), b.checksum());
        let c: ParamSet<f32> = ParamSet::materialize(&s, &mut rng_from(6));
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn freeze_all_clears_trainability() {
        let set: ParamSet<f32> = ParamSet::materialize(&specs(), &mut rng_from(1));
        set.freeze_all();
        assert_eq!(set.trainable_count(), 0);
    }
}
