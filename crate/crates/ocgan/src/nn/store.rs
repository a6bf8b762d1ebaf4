use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::Real;

/// All learnable tensors (and normalization statistics), keyed by
/// `network/layer/param` names. `BTreeMap` keeps iteration order — and
/// therefore serialization — deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<R: Real> {
    tensors: BTreeMap<String, ArrayD<R>>,
}

impl<R: Real> ParameterStore<R> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<R>) {
        let name = name.into();
        debug_assert!(
            !self.tensors.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> &ArrayD<R> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<R> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn set(&mut self, name: &str, tensor: ArrayD<R>) {
        debug_assert_eq!(
            self.get(name).shape(),
            tensor.shape(),
            "shape change for {name}"
        );
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<R>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Bitwise equality of a subset of tensors, by name prefix.
    pub fn bitwise_eq_prefix(&self, other: &Self, prefix: &str) -> bool {
        let mine: Vec<_> = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect();
        let theirs: Vec<_> = other
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect();
        if mine.len() != theirs.len() {
            return false;
        }
        mine.iter().zip(theirs.iter()).all(|((an, av), (bn, bv))| {
            an == bn
                && av.shape() == bv.shape()
                && av.iter().zip(bv.iter()).all(|(a, b)| !a.to_bits_ne(b))
        })
    }
}

impl<R: Real> Default for ParameterStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

trait BitsNe {
    fn to_bits_ne(&self, other: &Self) -> bool;
}

impl<R: Real> BitsNe for R {
    fn to_bits_ne(&self, other: &Self) -> bool {
        // Bit-compare via the f64 image; exact for both f32 and f64 values.
        self.as_f64().to_bits() != other.as_f64().to_bits()
    }
}

/// Gradients accumulated during a backward pass, keyed like the store.
#[derive(Debug, Clone)]
pub struct GradStore<R: Real> {
    tensors: BTreeMap<String, ArrayD<R>>,
}

impl<R: Real> GradStore<R> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Add a contribution, summing with anything already recorded.
    pub fn accumulate(&mut self, name: &str, grad: ArrayD<R>) {
        match self.tensors.get_mut(name) {
            Some(existing) => *existing += &grad,
            None => {
                self.tensors.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<R>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<R>)> {
        self.tensors.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

impl<R: Real> Default for GradStore<R> {
    fn default() -> Self {
        Self::new()
    }
}
