//! Named parameter storage, deterministic initialization, and Adam updates.
//!
//! Parameters live outside any [`Tape`](crate::tensor::Tape); each forward
//! pass binds them as leaf nodes. Registration order is preserved everywhere
//! (initialization, optimizer sweeps, checkpoints), which keeps training runs
//! reproducible for a fixed seed.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    order: Vec<String>,
    index: HashMap<String, usize>,
    entries: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter initialized uniformly in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, drawn row-major from `rng`.
    /// Panics on a duplicate name; names are assigned once at model build.
    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, ParamTensor { data, rows, cols });
    }

    pub fn insert(&mut self, name: &str, tensor: ParamTensor) {
        assert_eq!(tensor.data.len(), tensor.rows * tensor.cols);
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.order.push(name.to_string());
        self.entries.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Names in registration order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn any_with_prefix(&self, prefix: &str) -> bool {
        self.order.iter().any(|n| n.starts_with(prefix))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Raw little-endian bytes of every parameter whose name matches
    /// `filter`, in registration order. Used for bitwise freeze checks.
    pub fn bytes_where(&self, filter: impl Fn(&str) -> bool) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, entry) in self.order.iter().zip(&self.entries) {
            if filter(name) {
                for &v in &entry.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Binds the named parameter as a tape leaf.
    pub fn bind(
        &self,
        tape: &mut Tape,
        name: &str,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        let entry = self
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        tape.leaf(entry.data.clone(), entry.rows, entry.cols, requires_grad)
    }
}

/// Adam with bias correction; one shared step counter for all parameters.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient entry.
    /// Parameters absent from `grads` are untouched (this is how the frozen
    /// part of a model stays bitwise identical).
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<String, Vec<f64>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let entry = store.get_mut(&name).unwrap();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; entry.data.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; entry.data.len()]);
            for i in 0..entry.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                entry.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
