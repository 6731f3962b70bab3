//! Parameter storage and the adaptive-moment optimizer. Parameters live in a
//! registration-ordered store; each forward pass mounts them on the tape as
//! leaves, and the optimizer consumes the gradients read back off the leaves.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.index_of(name)
            .map(|i| &self.values[i])
            .ok_or_else(|| Error::missing(format!("parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::missing(format!("parameter {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::contract(format!(
                "parameter {name}: shape {:?} cannot replace {:?}",
                value.shape(),
                self.values[i].shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    /// Registration order, which fixes checkpoint and moment layout.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    pub fn value_at(&self, i: usize) -> &ArrayD<f64> {
        &self.values[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Parameters mounted on a tape for one forward/backward pass. Bindings keep
/// the store's order so gradients can be read back aligned.
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<crate::graph::Var>,
}

impl BoundParams {
    /// Mount every parameter as a differentiable leaf.
    pub fn mount(g: &mut crate::Graph, store: &ParamStore) -> Self {
        let mut vars = Vec::with_capacity(store.len());
        for (_, value) in store.iter() {
            vars.push(g.leaf(value.clone()));
        }
        BoundParams {
            names: store.names.clone(),
            vars,
        }
    }

    /// Mount every parameter as a constant (evaluation path, no gradients).
    pub fn mount_frozen(g: &mut crate::Graph, store: &ParamStore) -> Self {
        let mut vars = Vec::with_capacity(store.len());
        for (_, value) in store.iter() {
            vars.push(g.constant(value.clone()));
        }
        BoundParams {
            names: store.names.clone(),
            vars,
        }
    }

    pub fn var(&self, name: &str) -> Result<crate::graph::Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::missing(format!("parameter {name} not mounted")))
    }

    /// Gradients in store order after a backward pass; `None` for parameters
    /// the loss never touched.
    pub fn collect_grads(&self, g: &crate::Graph) -> Vec<Option<ArrayD<f64>>> {
        self.vars
            .iter()
            .map(|&v| g.grad(v).map(|gr| gr.to_owned()))
            .collect()
    }
}

/// Gaussian init with the given standard deviation.
pub fn normal_init<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite positive");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
}

/// Fan-in scaled Gaussian init for a (out, in) weight matrix.
pub fn fan_in_init<R: Rng>(rng: &mut R, out: usize, inp: usize) -> ArrayD<f64> {
    normal_init(rng, &[out, inp], (1.0 / inp as f64).sqrt())
}

/// He init for layers followed by a nonlinearity. The sqrt(2) gain offsets the
/// amplitude the activation eats, so stacked stages keep their signal instead
/// of shrinking it a bit more per layer.
pub fn he_init<R: Rng>(rng: &mut R, out: usize, inp: usize) -> ArrayD<f64> {
    normal_init(rng, &[out, inp], (2.0 / inp as f64).sqrt())
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Adam with standard decay rates 0.9/0.999 and epsilon 1e-8. Moment arrays
/// are aligned with the store's registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: store.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: store.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    /// One update. `grads[i]` pairs with the store's i-th parameter; `None`
    /// means zero gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<ArrayD<f64>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer saw {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::config(format!("learning rate {lr} invalid")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..store.len() {
            let g = match &grads[i] {
                Some(g) => g,
                None => continue,
            };
            if g.shape() != store.values[i].shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    store.names[i],
                    store.values[i].shape()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(m).and(v).and(&mut store.values[i]).and(g).for_each(
                |m, v, p, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                },
            );
        }
        Ok(())
    }
}
