//! Named parameter storage with Adam state.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(gain / fan_in)`, fan-in from dims 1..4.
    FanIn(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }
}

#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Param<T>>,
    step: u64,
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// Clones get a fresh identity so graphs never confuse the two.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            step: self.step,
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn add(&mut self, name: impl Into<String>, shape: [usize; 4], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::FanIn(gain) => {
                let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
                let bound = (gain / fan_in as f64).sqrt();
                (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
            }
        };
        self.push(name.into(), Tensor::from_vec(shape, data).expect("init size"))
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> ParamId {
        let n = value.numel();
        self.params.push(Param {
            name,
            value,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// For every parameter named `{to_prefix}rest`, copy the value of
    /// `{from_prefix}rest` when it exists with the same shape.
    pub fn copy_within(&mut self, from_prefix: &str, to_prefix: &str) -> usize {
        let mut copied = 0;
        for i in 0..self.params.len() {
            let Some(rest) = self.params[i].name.strip_prefix(to_prefix) else { continue };
            let src_name = format!("{from_prefix}{rest}");
            let Some(j) = self.params.iter().position(|q| q.name == src_name) else { continue };
            if self.params[j].value.shape() == self.params[i].value.shape() {
                self.params[i].value = self.params[j].value.clone();
                copied += 1;
            }
        }
        copied
    }

    /// Replace all values, matching by name and shape.
    pub fn load_values(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if self.params[id.0].value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            self.params[id.0].value = t;
        }
        Ok(())
    }

    /// One Adam update from the gradients belonging to this store.
    /// Returns the (pre-clip) global gradient norm.
    pub fn adam_step(&mut self, grads: &Gradients<T>, cfg: &AdamConfig) -> f64 {
        let norm = grads.sq_norm(self).as_f64().sqrt();
        let scale = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let step_size = T::lit(cfg.lr * bc2.sqrt() / bc1);
        let eps = T::lit(cfg.eps * bc2.sqrt());
        let scale = T::lit(scale);
        for i in 0..self.params.len() {
            let Some(g) = grads.param(self, ParamId(i)) else { continue };
            let p = &mut self.params[i];
            for (((w, m), v), &gi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
                .zip(g.data())
            {
                let gi = gi * scale;
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                *w -= step_size * *m / (v.sqrt() + eps);
            }
        }
        norm
    }
}
