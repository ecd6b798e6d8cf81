//! Named parameter stores and the optimizers that update them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named tensors plus their adaptive-optimizer moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    pub adam: AdamState,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            tensors,
            adam: AdamState::default(),
        }
    }

    fn check_grads(&self, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            match self.tensors.get(name) {
                None => return Err(Error::InvalidArgument(format!("gradient for unknown parameter {name}"))),
                Some(p) if p.shape() != g.shape() => {
                    return Err(Error::Shape {
                        op: "optimizer",
                        detail: format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                    })
                }
                _ => {}
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(())
    }

    /// Deep copy of the tensors; the copy carries no optimizer state.
    pub fn clone_params(&self) -> ParamStore {
        Self::from_tensors(self.tensors.clone())
    }

    /// Returns `w - lr * g` for every parameter without touching `self`.
    /// Parameters without a gradient are copied unchanged.
    pub fn apply_delta(&self, grads: &GradMap, lr: f64) -> Result<ParamStore> {
        self.check_grads(grads)?;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, w)| {
                let mut out = w.clone();
                if let Some(g) = grads.get(name) {
                    out.axpy(-lr, g);
                }
                (name.clone(), out)
            })
            .collect();
        Ok(Self::from_tensors(tensors))
    }

    /// Plain gradient descent in place. Allocates no optimizer state.
    pub fn sgd_step(&mut self, grads: &GradMap, lr: f64) -> Result<()> {
        self.check_grads(grads)?;
        for (name, g) in grads {
            if let Some(w) = self.tensors.get_mut(name) {
                w.axpy(-lr, g);
            }
        }
        Ok(())
    }

    /// One Adam step; parameters missing from `grads` see a zero gradient.
    pub fn adam_step(&mut self, grads: &GradMap, lr: f64, cfg: &AdamConfig) -> Result<()> {
        self.check_grads(grads)?;
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, w) in self.tensors.iter_mut() {
            let (r, c) = w.shape();
            let m = self.adam.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
            let v = self.adam.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(r, c));
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(r, c);
                    &zero
                }
            };
            for i in 0..w.len() {
                let gi = g.data()[i];
                let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                w.data_mut()[i] -= step;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s
    }

    fn grad(g: f64) -> GradMap {
        BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn sgd_fixtures() {
        let mut s = scalar_store(1.0);
        s.sgd_step(&grad(1.0), 0.0).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 1.0);
        s.sgd_step(&grad(1.0), 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.9);
        assert_eq!(s.adam, AdamState::default());
    }

    #[test]
    fn adam_lr_zero_keeps_params() {
        let mut s = scalar_store(1.0);
        s.adam_step(&grad(3.0), 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 1.0);
        assert_eq!(s.adam.step, 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = scalar_store(1.0);
        let cfg = AdamConfig::default();
        let mut steps = 0;
        while s.get("w").unwrap().item().abs() >= 1e-3 {
            let w = s.get("w").unwrap().item();
            s.adam_step(&grad(2.0 * w), 0.01, &cfg).unwrap();
            steps += 1;
            assert!(steps <= 2000, "did not converge, w = {w}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = scalar_store(1.0);
        let bad = BTreeMap::from([("w".to_string(), Tensor::zeros(2, 1))]);
        assert!(s.sgd_step(&bad, 0.1).is_err());
        assert!(s.adam_step(&bad, 0.1, &AdamConfig::default()).is_err());
        assert!(s.apply_delta(&bad, 0.1).is_err());
    }

    #[test]
    fn clone_is_independent() {
        let s = scalar_store(1.0);
        let mut c = s.clone_params();
        c.get_mut("w").unwrap().data_mut()[0] = 5.0;
        assert_eq!(s.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn apply_delta_never_aliases() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        let same = s.apply_delta(&GradMap::new(), 0.0).unwrap();
        assert_eq!(same.get("a"), s.get("a"));
        assert_ne!(same.get("a").unwrap().data().as_ptr(), s.get("a").unwrap().data().as_ptr());

        let g = BTreeMap::from([("a".to_string(), Tensor::row(vec![0.5, -1.0, 2.0]))]);
        let mut moved = s.apply_delta(&g, 0.1).unwrap();
        let expect = [1.0 - 0.1 * 0.5, 2.0 + 0.1, 3.0 - 0.2];
        assert_eq!(moved.get("a").unwrap().data(), &expect);
        moved.get_mut("a").unwrap().data_mut()[0] = -7.0;
        assert_eq!(s.get("a").unwrap().data(), &[1.0, 2.0, 3.0]);
    }
}
