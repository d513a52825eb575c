//! Parameterized building blocks. Each layer only stores [`ParamId`]s; the
//! values live in a [`ParamStore`].

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), [c_out, c_in, k, k], Init::FanIn(6.0), rng),
            bias: store.add(format!("{name}.bias"), [1, c_out, 1, 1], Init::Zeros, rng),
            stride,
            pad,
        }
    }

    /// Same-size 3x3 convolution.
    pub fn same3<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        Self::new(store, rng, name, c_in, c_out, 3, 1, 1)
    }

    pub fn pointwise<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        Self::new(store, rng, name, c_in, c_out, 1, 1, 0)
    }

    /// 1x1 convolution with zero weights and bias.
    pub fn zero<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), [c_out, c_in, 1, 1], Init::Zeros, rng),
            bias: store.add(format!("{name}.bias"), [1, c_out, 1, 1], Init::Zeros, rng),
            stride: 1,
            pad: 0,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Groups used for `c` channels: the largest of 8, 4, 2, 1 dividing `c`.
pub fn default_groups(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), [1, c, 1, 1], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), [1, c, 1, 1], Init::Zeros, rng),
            groups: default_groups(c),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.group_norm(x, gm, bt, self.groups)
    }
}

/// Dense layer on `[n, c, 1, 1]` tensors.
#[derive(Clone, Debug)]
pub struct Linear(pub Conv2d);

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        Self(Conv2d::pointwise(store, rng, name, c_in, c_out))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        self.0.forward(g, store, x)
    }
}

/// Pre-activation residual block with an optional per-channel embedding.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        emb_dim: Option<usize>,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, rng, &format!("{name}.norm1"), c_in),
            conv1: Conv2d::same3(store, rng, &format!("{name}.conv1"), c_in, c_out),
            emb: emb_dim.map(|d| Linear::new(store, rng, &format!("{name}.emb"), d, c_out)),
            norm2: GroupNorm::new(store, rng, &format!("{name}.norm2"), c_out),
            conv2: Conv2d::same3(store, rng, &format!("{name}.conv2"), c_out, c_out),
            skip: (c_in != c_out).then(|| Conv2d::pointwise(store, rng, &format!("{name}.skip"), c_in, c_out)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, emb: Option<Var>) -> Var {
        let h = self.norm1.forward(g, store, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, store, h);
        if let (Some(layer), Some(e)) = (&self.emb, emb) {
            let e = g.silu(e);
            let e = layer.forward(g, store, e);
            h = g.add_channel(h, e);
        }
        let h = self.norm2.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, store, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl AttentionBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        Self {
            norm: GroupNorm::new(store, rng, &format!("{name}.norm"), c),
            q: Conv2d::pointwise(store, rng, &format!("{name}.q"), c, c),
            k: Conv2d::pointwise(store, rng, &format!("{name}.k"), c, c),
            v: Conv2d::pointwise(store, rng, &format!("{name}.v"), c, c),
            proj: Conv2d::pointwise(store, rng, &format!("{name}.proj"), c, c),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.norm.forward(g, store, x);
        let q = self.q.forward(g, store, h);
        let k = self.k.forward(g, store, h);
        let v = self.v.forward(g, store, h);
        let a = g.attention(q, k, v);
        let o = self.proj.forward(g, store, a);
        g.add(x, o)
    }
}

/// Sinusoidal features of `value` as a `[n, dim, 1, 1]` row per item.
pub fn sinusoidal<T: Scalar>(values: &[f64], dim: usize, max_period: f64) -> super::tensor::Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            data.push(T::lit((v * freq).cos()));
        }
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            data.push(T::lit((v * freq).sin()));
        }
        if dim % 2 == 1 {
            data.push(T::zero());
        }
    }
    super::tensor::Tensor::from_vec([values.len(), dim, 1, 1], data).expect("embedding size")
}
