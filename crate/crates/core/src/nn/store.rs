use std::fmt::Display;
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{numel, Tensor};

/// How a freshly allocated parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Const(f64),
    /// `U(−bound, bound)`.
    Uniform(f64),
    /// Normal with the given standard deviation, truncated at two deviations.
    TruncNormal(f64),
}

impl Init {
    /// The default for weights and biases fed by `fan_in` inputs.
    pub fn fan_in(fan_in: usize) -> Init {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Persistent state that is not optimised (running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

struct StoreInner {
    entries: Vec<NamedTensor>,
    rng: ChaCha8Rng,
}

/// Registry of every parameter and buffer of a model, in creation order.
///
/// Cloning shares the registry. Initial values are drawn from a seeded
/// ChaCha stream, so a model built twice from the same seed is identical.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            inner: Arc::new(Mutex::new(StoreInner {
                entries: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, StoreInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn root(&self) -> VarBuilder {
        VarBuilder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn entries(&self) -> Vec<NamedTensor> {
        self.lock().entries.clone()
    }

    pub fn trainable(&self) -> Vec<NamedTensor> {
        self.lock()
            .entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .cloned()
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.lock()
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.tensor.clone())
    }

    /// Number of trainable scalars actually allocated.
    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for e in self.lock().entries.iter() {
            e.tensor.zero_grad();
        }
    }

    /// Running statistics of every batch norm set to mean 0, variance
    /// `1 − eps`, so eval-mode normalization is the identity up to the affine.
    pub fn set_batch_norm_identity_stats(&self) -> crate::error::Result<()> {
        for e in self.entries() {
            let value = if e.name.ends_with(".running_mean") {
                0.0
            } else if e.name.ends_with(".running_var") {
                1.0 - crate::ops::BATCH_NORM_EPS
            } else if e.name.ends_with(".num_batches_tracked") {
                1.0
            } else {
                continue;
            };
            e.tensor
                .update_data(|d| d.iter_mut().for_each(|v| *v = value))?;
        }
        Ok(())
    }

    fn register(&self, name: String, tensor: Tensor, kind: ParamKind) -> Tensor {
        let mut inner = self.lock();
        assert!(
            inner.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        inner.entries.push(NamedTensor {
            name,
            tensor: tensor.clone(),
            kind,
        });
        tensor
    }

    fn sample(&self, n: usize, init: Init) -> Vec<f64> {
        let mut inner = self.lock();
        let rng = &mut inner.rng;
        match init {
            Init::Const(v) => vec![v; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        }
    }
}

/// A cursor into a [`ParamStore`] that prefixes parameter names.
#[derive(Clone)]
pub struct VarBuilder {
    store: ParamStore,
    prefix: String,
}

impl VarBuilder {
    /// Child builder under `name` (dot-separated paths).
    pub fn pp(&self, name: impl Display) -> VarBuilder {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        VarBuilder {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Tensor {
        let data = self.store.sample(numel(shape), init);
        let t = Tensor::param(data, shape).expect("non-empty parameter shape");
        self.store
            .register(self.path(name), t, ParamKind::Trainable)
    }

    pub fn buffer(&self, name: &str, tensor: Tensor) -> Tensor {
        self.store
            .register(self.path(name), tensor, ParamKind::Buffer)
    }
}
