//! Named parameter storage, layer building blocks and the Adam optimiser.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{ensure, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// All trainable tensors of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.constant(p.value.clone())).collect())
    }

    /// Replaces all values, checking names and shapes.
    pub fn load(&mut self, other: &[Param]) -> Result<()> {
        ensure!(other.len() == self.params.len(), "expected {} parameters, got {}", self.params.len(), other.len());
        for (mine, theirs) in self.params.iter_mut().zip(other) {
            ensure!(mine.name == theirs.name, "parameter {} does not match {}", mine.name, theirs.name);
            ensure!(
                mine.value.shape() == theirs.value.shape(),
                "parameter {} has shape {:?}, expected {:?}",
                mine.name,
                theirs.value.shape(),
                mine.value.shape()
            );
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

/// Parameters recorded on a tape, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut RngState) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| std * rng.normal())
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `k × k` convolution with He-normal weights and zero bias.
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut RngState) -> Self {
        let w = store.add(format!("{name}.w"), he_normal(&[cout, cin, k, k], cin * k * k, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b, stride, pad: k / 2 }
    }

    /// Same shape as [`Conv::new`] but all weights zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([cout, cin, k, k]));
        let b = store.add(format!("{name}.b"), Tensor::zeros([cout]));
        Self { w, b, stride: 1, pad: k / 2 }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var) -> Var {
        t.conv2d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, std: f64, rng: &mut RngState) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::from_fn([n_out, n_in], |_| std * rng.normal()));
        let b = store.add(format!("{name}.b"), Tensor::zeros([n_out]));
        Self { w, b }
    }

    pub fn forward(&self, t: &Tape, p: &Bound, x: Var) -> Var {
        t.linear(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update with the gradients of `bound` in `grads`.
    /// Parameters that received no gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, &var) in bound.vars().iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = &mut store.params[i].value;
            if lr == 0.0 {
                for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                }
                continue;
            }
            for (((x, mi), vi), &gi) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new([3], vec![3.0, -2.0, 0.5]));
        let mut opt = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let t = Tape::new();
            let p = store.bind(&t);
            let target = t.constant(Tensor::new([3], vec![1.0, 1.0, 1.0]));
            let loss = t.sum(t.square(t.sub(p.var(id), target)));
            let g = t.backward(loss);
            opt.update(&mut store, &p, &g, 0.05);
        }
        assert!(store.get(id).data().iter().all(|v| (v - 1.0).abs() < 1e-3), "{:?}", store.get(id));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new([2], vec![0.0, 0.0]));
        let mut opt = Adam::new(&store, AdamConfig::default());
        let t = Tape::new();
        let p = store.bind(&t);
        let loss = t.sum(t.mul(p.var(id), t.constant(Tensor::new([2], vec![3.0, -0.01]))));
        let g = t.backward(loss);
        opt.update(&mut store, &p, &g, 0.1);
        assert!((store.get(id).data()[0] + 0.1).abs() < 1e-6);
        assert!((store.get(id).data()[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let mut rng = RngState::new(1);
        let mut store = ParamStore::new();
        let conv = Conv::new(&mut store, "c", 2, 3, 3, 1, &mut rng);
        let before = store.clone();
        let mut opt = Adam::new(&store, AdamConfig::default());
        let t = Tape::new();
        let p = store.bind(&t);
        let x = t.constant(Tensor::from_fn([2, 8, 8], |_| rng.normal()));
        let loss = t.sum(t.square(conv.forward(&t, &p, x)));
        let g = t.backward(loss);
        opt.update(&mut store, &p, &g, 0.0);
        assert_eq!(store, before);
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros([2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros([3]));
        assert!(a.load(b.params()).is_err());
        let mut c = ParamStore::new();
        c.add("v", Tensor::zeros([2]));
        assert!(a.load(c.params()).is_err());
        let mut d = ParamStore::new();
        d.add("w", Tensor::full([2], 4.0));
        a.load(d.params()).unwrap();
        assert_eq!(a.get(a.find("w").unwrap()).data(), &[4.0, 4.0]);
        assert_eq!(a.count(), 2);
    }
}
