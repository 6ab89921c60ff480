//! Named parameter storage shared by every trainable model.
//!
//! A [`ParamStore`] owns values, gradient accumulators and Adam moments,
//! keyed by dotted names (`"vaccinator.enc0.block1.conv1.weight"`). Keys
//! iterate in sorted order everywhere, so optimisation and serialisation
//! are order-deterministic.

use std::collections::BTreeMap;

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, NodeId, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub value: Array4<S>,
    pub grad: Array4<S>,
    pub adam_m: Array4<S>,
    pub adam_v: Array4<S>,
}

#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    entries: BTreeMap<String, ParamEntry<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    /// Register a parameter with its initial value. Names must be unique.
    pub fn declare(&mut self, name: &str, value: Array4<S>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Parameter(format!("duplicate parameter name {name:?}")));
        }
        let dim = value.raw_dim();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Array4::zeros(dim.clone()),
                adam_m: Array4::zeros(dim.clone()),
                adam_v: Array4::zeros(dim),
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Array4<S>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name:?}")))
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name:?}")))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name:?}")))
    }

    /// Sorted parameter names.
    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(|s| s.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(S::zero());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Array4<S>) -> Result<()> {
        let e = self.entry_mut(name)?;
        if e.grad.shape() != grad.shape() {
            return Err(Error::dimension(
                "accumulate_grad",
                format!("{:?}", e.grad.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        e.grad.zip_mut_with(grad, |a, &b| *a = *a + b);
        Ok(())
    }

    /// L2 norm of the concatenated gradient — a cheap training diagnostic.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.iter())
            .map(|&g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// True if any parameter or gradient holds a non-finite value.
    pub fn any_non_finite(&self) -> bool {
        self.entries
            .values()
            .any(|e| e.value.iter().any(|v| !v.as_f64().is_finite()))
    }
}

/// Tracks which tape leaves correspond to which store parameters for one
/// constructed graph, so gradients can be copied back after `backward`.
#[derive(Default)]
pub struct GraphParams {
    bound: Vec<(String, NodeId)>,
}

impl GraphParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert the parameter's current value into the graph as a
    /// gradient-tracked leaf and remember the association.
    pub fn bind<S: Scalar>(
        &mut self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        name: &str,
    ) -> Result<NodeId> {
        let id = g.input(store.value(name)?.clone(), true);
        self.bound.push((name.to_string(), id));
        Ok(id)
    }

    /// Copy gradients off the tape into the store's accumulators.
    /// Parameters the loss never touched keep a zero gradient.
    pub fn harvest<S: Scalar>(&self, g: &Graph<S>, store: &mut ParamStore<S>) -> Result<()> {
        for (name, id) in &self.bound {
            if let Some(grad) = g.grad(*id) {
                store.accumulate_grad(name, grad)?;
            }
        }
        Ok(())
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.iter().map(|(n, _)| n.as_str())
    }
}

/// Kaiming-He normal init for conv weights: `std = sqrt(2 / fan_in)` with
/// `fan_in = c_in_per_group · kh · kw`. Samples are drawn in f64 so the
/// same seed yields the same network in every precision.
pub fn he_normal<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize, usize, usize),
) -> Array4<S> {
    let fan_in = (shape.1 * shape.2 * shape.3).max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    normal_init(rng, shape, std)
}

/// Normal(0, std²) init.
pub fn normal_init<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize, usize, usize),
    std: f64,
) -> Array4<S> {
    let dist = Normal::new(0.0f64, std).expect("std must be finite and positive");
    Array4::from_shape_simple_fn(shape, || S::of_f64(dist.sample(rng)))
}

/// All-zero tensor (biases, zero-initialised output convs).
pub fn zeros<S: Scalar>(shape: (usize, usize, usize, usize)) -> Array4<S> {
    Array4::zeros(shape)
}

/// `1×C×1×1` of ones (norm gain).
pub fn ones_c<S: Scalar>(c: usize) -> Array4<S> {
    Array4::ones((1, c, 1, 1))
}

/// `1×C×1×1` of zeros (norm shift / bias).
pub fn zeros_c<S: Scalar>(c: usize) -> Array4<S> {
    Array4::zeros((1, c, 1, 1))
}
