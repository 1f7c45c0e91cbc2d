//! Named parameter storage, gradient accumulation, and Adam updates.
//!
//! Parameters live outside any tape; each forward pass leases them onto a
//! fresh tape as leaves. Insertion order is fixed at model construction,
//! which makes checkpoints and updates deterministic.

use indexmap::IndexMap;

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

pub struct ParamStore {
    by_name: IndexMap<String, usize>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            by_name: IndexMap::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.to_string(), id.0);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) {
        debug_assert_eq!(tensor.shape(), self.tensors[id.0].shape());
        self.tensors[id.0] = tensor;
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|i| ParamId(*i))
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        self.by_name.get_index(id.0).unwrap().0
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Lease a parameter onto a tape. Trainable parameters become
    /// gradient-bearing leaves; frozen ones become constants. Repeated
    /// leases on one tape share a single leaf.
    pub fn var(&self, tape: &Tape, id: ParamId) -> Var {
        tape.param_leaf(&self.tensors[id.0], self.trainable[id.0], id)
    }

    /// (name, tensor, trainable) in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.by_name
            .iter()
            .map(|(name, &i)| (name.as_str(), &self.tensors[i], self.trainable[i]))
    }

    /// Total scalar parameter count over names starting with any prefix.
    pub fn count_with_prefixes(&self, prefixes: &[&str]) -> usize {
        self.iter()
            .filter(|(name, _, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(_, t, _)| t.numel())
            .sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient sums for one optimizer step.
pub struct GradAccumulator {
    grads: Vec<Option<Tensor>>,
}

impl GradAccumulator {
    pub fn new(store: &ParamStore) -> Self {
        GradAccumulator {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, grad: &Tensor) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    /// Absorb all parameter gradients recorded on a finished tape.
    pub fn absorb(&mut self, tape: &Tape) {
        for (id, grad) in tape.param_grads() {
            self.add(id, &grad);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct AdamState {
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .iter()
            .map(|(_, t, _)| Tensor::zeros(t.shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { t: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One Adam step over every trainable parameter that received a
    /// gradient. Deterministic: parameters update in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccumulator, cfg: &AdamConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            if !store.trainable[i] {
                continue;
            }
            let Some(g) = grads.grads[i].as_ref() else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.tensors[i];
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_closed_form() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::from_vec(&[1], vec![0.5]).unwrap(), true)
            .unwrap();
        let mut adam = AdamState::new(&store);
        let mut grads = GradAccumulator::new(&store);
        grads.add(id, &Tensor::from_vec(&[1], vec![1.0]).unwrap());
        adam.step(
            &mut store,
            &grads,
            &AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
        );
        // First bias-corrected step moves by almost exactly -lr.
        let delta = store.get(id).data()[0] - 0.5;
        assert!(delta < 0.0);
        assert!((0.0999..=0.1).contains(&delta.abs()), "delta {delta}");
    }

    #[test]
    fn adam_skips_missing_and_frozen() {
        let mut store = ParamStore::new();
        let a = store
            .add("a", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let b = store
            .add("b", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap(), false)
            .unwrap();
        let mut adam = AdamState::new(&store);
        let mut grads = GradAccumulator::new(&store);
        grads.add(b, &Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        adam.step(&mut store, &grads, &AdamConfig::default());
        // a had no grad, b is frozen: both unchanged.
        assert_eq!(store.get(a).data(), &[1.0, 2.0]);
        assert_eq!(store.get(b).data(), &[3.0, 4.0]);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut store = ParamStore::new();
        let a = store
            .add("a", Tensor::from_vec(&[1], vec![0.7]).unwrap(), true)
            .unwrap();
        let b = store
            .add("b", Tensor::from_vec(&[1], vec![0.7]).unwrap(), true)
            .unwrap();
        let mut adam = AdamState::new(&store);
        for _ in 0..5 {
            let mut grads = GradAccumulator::new(&store);
            grads.add(a, &Tensor::from_vec(&[1], vec![0.3]).unwrap());
            grads.add(b, &Tensor::from_vec(&[1], vec![0.3]).unwrap());
            adam.step(&mut store, &grads, &AdamConfig::default());
        }
        assert_eq!(store.get(a).data(), store.get(b).data());
    }

    #[test]
    fn clip_global_norm_scales() {
        let mut store = ParamStore::new();
        let a = store
            .add("a", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), true)
            .unwrap();
        let mut grads = GradAccumulator::new(&store);
        grads.add(a, &Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
        grads.clip_global_norm(1.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
        // Clipping below the threshold is a no-op.
        grads.clip_global_norm(2.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[1]), true).unwrap();
        assert!(store.add("w", Tensor::zeros(&[1]), true).is_err());
    }
}
