//! Named parameter containers, initialization and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tape::{Gradients, NodeId, Tape};

/// An ordered map of named arrays. Iteration order is the sorted name order,
/// which fixes the layout of checkpoints and the order of optimizer updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|v| v.iter().all(|e| e.is_finite()))
    }

    /// Largest absolute entry across all arrays; 0 for empty containers.
    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, &e| m.max(e.abs()))
    }
}

/// Tape bindings for a parameter container: one leaf node per name.
pub struct ParamNodes {
    ids: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect gradients back into a named container (zeros where a parameter
    /// did not participate in the loss).
    pub fn grads(&self, params: &Params, grads: &Gradients) -> Params {
        let mut out = Params::new();
        for (name, value) in params.iter() {
            let g = grads
                .get(self.id(name))
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(value.raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

impl Tape {
    /// Bind every parameter onto the tape. Trainable bindings become tracked
    /// leaves; frozen bindings become constants, which keeps the kernels (and
    /// therefore the bits) identical between the two modes.
    pub fn bind(&mut self, params: &Params, trainable: bool) -> ParamNodes {
        let mut ids = BTreeMap::new();
        for (name, value) in params.iter() {
            let id = if trainable {
                self.param(value.clone())
            } else {
                self.constant(value.clone())
            };
            ids.insert(name.clone(), id);
        }
        ParamNodes { ids }
    }
}

/// Draw a matrix with N(0, 1/fan_in) entries.
pub fn init_linear(rng: &mut Stream, fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let std = (1.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

pub fn zeros1(n: usize) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(&[n]))
}

pub fn ones1(n: usize) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[n]), 1.0)
}

/// Adam with per-parameter first/second moments, applied in name order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.99, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. Gradients must carry the same names.
    pub fn update(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("gradient for unknown parameter {name}")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Params::new();
        p.insert("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut g = Params::new();
        g.insert("w", ArrayD::from_elem(IxDyn(&[2]), 0.5));
        let mut opt = Adam::new(0.1);
        opt.update(&mut p, &g).unwrap();
        let w = p.get("w").unwrap();
        assert!(w.iter().all(|&e| e < 1.0));
    }

    #[test]
    fn adam_zero_grad_leaves_param_unchanged() {
        let mut p = Params::new();
        p.insert("w", ArrayD::from_elem(IxDyn(&[3]), 0.7));
        let mut g = Params::new();
        g.insert("w", ArrayD::zeros(IxDyn(&[3])));
        let mut opt = Adam::new(0.1);
        opt.update(&mut p, &g).unwrap();
        assert!(p.get("w").unwrap().iter().all(|&e| e == 0.7));
    }

    #[test]
    fn params_iterate_in_name_order() {
        let mut p = Params::new();
        p.insert("b", zeros1(1));
        p.insert("a", zeros1(1));
        p.insert("c", zeros1(1));
        let names: Vec<&str> = p.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }
}
