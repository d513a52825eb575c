//! Define-by-run reverse-mode autodiff over [`Tensor`]s.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::kernels::{self, GroupNormSaved};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::raster::Raster;
use crate::refiner::cc_loss::{cc_loss_with_grad, CcLossConfig};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Silu,
    Sigmoid,
    Tanh,
    Exp,
    Abs,
    Square,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddChannel {
        x: Var,
        bias: Var,
    },
    Scale(Var, T),
    AddScalar(Var),
    Concat(Var, Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Upsample2(Var),
    Act(Var, Activation),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        saved: GroupNormSaved<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    Mean(Var),
    CcLoss {
        pred: Var,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    params: BTreeMap<(u64, usize), Tensor<T>>,
    vars: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&(store.uid(), id.index()))
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(&v)
    }

    /// Sum of squares over all gradients belonging to `store`.
    pub fn sq_norm(&self, store: &ParamStore<T>) -> T {
        self.params
            .iter()
            .filter(|((uid, _), _)| *uid == store.uid())
            .flat_map(|(_, t)| t.data().iter())
            .map(|&v| v * v)
            .sum()
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<(u64, usize), Var>,
    frozen: HashSet<u64>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            frozen: HashSet::new(),
        }
    }

    /// Parameters of `store` enter this graph as constants.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.insert(store.uid());
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::var`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.param_vars.get(&key) {
            return v;
        }
        let trainable = !self.frozen.contains(&store.uid());
        let v = self.push(store.value(id).clone(), Op::Leaf, trainable);
        self.param_vars.insert(key, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `x [n, c, h, w] + bias [n, c, 1, 1]`, broadcast over space.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert_eq!(self.shape(bias), [n, c, 1, 1], "add_channel bias shape");
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for (p, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv[p]);
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddChannel { x, bias }, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        let ng = self.ng(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let [n, ca, h, w] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        assert_eq!((n, h, w), (nb, hb, wb), "concat shape mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * h * w..(i + 1) * ca * h * w]);
            data.extend_from_slice(&self.value(b).data()[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data).expect("concat size");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Concat(a, b), ng)
    }

    /// Channels `[start, start + len)`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert!(start + len <= c, "narrow out of range");
        let mut data = Vec::with_capacity(n * len * h * w);
        for i in 0..n {
            let off = (i * c + start) * h * w;
            data.extend_from_slice(&self.value(x).data()[off..off + len * h * w]);
        }
        let out = Tensor::from_vec([n, len, h, w], data).expect("narrow size");
        let ng = self.ng(x);
        self.push(out, Op::Narrow { x, start }, ng)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = kernels::upsample2_forward(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::Upsample2(x), ng)
    }

    pub fn act(&mut self, x: Var, a: Activation) -> Var {
        let out = self.value(x).map(|v| match a {
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu(s) => {
                if v > T::zero() {
                    v
                } else {
                    v * T::lit(s)
                }
            }
            Activation::Silu => v / (T::one() + (-v).exp()),
            Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
            Activation::Tanh => v.tanh(),
            Activation::Exp => v.exp(),
            Activation::Abs => v.abs(),
            Activation::Square => v * v,
        });
        let ng = self.ng(x);
        self.push(out, Op::Act(x, a), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.act(x, Activation::Sigmoid)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (out, saved) = kernels::group_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            groups,
            T::lit(1e-5),
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            },
            ng,
        )
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (out, probs) = kernels::attention_forward(self.value(q), self.value(k), self.value(v));
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, probs }, ng)
    }

    /// Mean of all elements, as a `[1, 1, 1, 1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().copied().sum::<T>() / T::from_usize_lossy(t.numel());
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// `mean |a - b|`.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.act(d, Activation::Abs);
        self.mean(ad)
    }

    /// Batch mean of the region-wise cross-correlation loss of each
    /// single-channel prediction against its target.
    pub fn cc_loss(&mut self, pred: Var, target: &Tensor<T>, cfg: &CcLossConfig) -> Var {
        let p = self.value(pred);
        let [n, c, h, w] = p.shape();
        assert_eq!(c, 1, "cc_loss expects single-channel maps");
        assert_eq!(p.shape(), target.shape(), "cc_loss shape mismatch");
        let inv_n = T::one() / T::from_usize_lossy(n);
        let mut total = T::zero();
        let mut grad = Tensor::zeros(p.shape());
        for i in 0..n {
            let pr = p.raster(i, 0);
            let tr = target.raster(i, 0);
            let (l, g): (T, Raster<T>) = cc_loss_with_grad(&pr, &tr, cfg).expect("validated shapes");
            total += l;
            grad.data_mut()[i * h * w..(i + 1) * h * w]
                .iter_mut()
                .zip(g.data())
                .for_each(|(d, &s)| *d = s * inv_n);
        }
        let ng = self.ng(pred);
        self.push(Tensor::scalar(total * inv_n), Op::CcLoss { pred, grad }, ng)
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let emit = |v: Var, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                        self.ng(*x),
                        self.ng(*w),
                        b.is_some_and(|b| self.ng(b)),
                    );
                    if let Some(dx) = cg.dx {
                        emit(*x, dx, &mut grads);
                    }
                    if let Some(dw) = cg.dw {
                        emit(*w, dw, &mut grads);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        emit(*b, db, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    emit(*a, g.clone(), &mut grads);
                    emit(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    emit(*a, g.clone(), &mut grads);
                    emit(*b, g.map(|v| -v), &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |d, y| d * y);
                    let gb = g.zip_map(self.value(*a), |d, x| d * x);
                    emit(*a, ga, &mut grads);
                    emit(*b, gb, &mut grads);
                }
                Op::AddChannel { x, bias } => {
                    let [n, c, h, w] = g.shape();
                    let mut gb = Tensor::zeros([n, c, 1, 1]);
                    for (p, chunk) in g.data().chunks(h * w).enumerate() {
                        gb.data_mut()[p] = chunk.iter().copied().sum();
                    }
                    emit(*x, g, &mut grads);
                    emit(*bias, gb, &mut grads);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    emit(*x, g.map(|v| v * s), &mut grads);
                }
                Op::AddScalar(x) => emit(*x, g, &mut grads),
                Op::Concat(a, b) => {
                    let [n, _, h, w] = g.shape();
                    let ca = self.shape(*a)[1];
                    let cb = self.shape(*b)[1];
                    let mut ga = Vec::with_capacity(n * ca * h * w);
                    let mut gb = Vec::with_capacity(n * cb * h * w);
                    for item in g.data().chunks((ca + cb) * h * w) {
                        ga.extend_from_slice(&item[..ca * h * w]);
                        gb.extend_from_slice(&item[ca * h * w..]);
                    }
                    emit(*a, Tensor::from_vec([n, ca, h, w], ga).expect("size"), &mut grads);
                    emit(*b, Tensor::from_vec([n, cb, h, w], gb).expect("size"), &mut grads);
                }
                Op::Narrow { x, start } => {
                    let [n, c, h, w] = self.shape(*x);
                    let len = g.shape()[1];
                    let mut gx = Tensor::zeros([n, c, h, w]);
                    for item in 0..n {
                        let dst = (item * c + start) * h * w;
                        let src = item * len * h * w;
                        gx.data_mut()[dst..dst + len * h * w]
                            .copy_from_slice(&g.data()[src..src + len * h * w]);
                    }
                    emit(*x, gx, &mut grads);
                }
                Op::Upsample2(x) => emit(*x, kernels::upsample2_backward(&g), &mut grads),
                Op::Act(x, a) => {
                    let xin = self.value(*x);
                    let y = &node.value;
                    let gx = match a {
                        Activation::Relu => g.zip_map(xin, |d, v| if v > T::zero() { d } else { T::zero() }),
                        Activation::LeakyRelu(s) => {
                            let s = T::lit(*s);
                            g.zip_map(xin, |d, v| if v > T::zero() { d } else { d * s })
                        }
                        Activation::Silu => g.zip_map(xin, |d, v| {
                            let sg = T::one() / (T::one() + (-v).exp());
                            d * (sg + v * sg * (T::one() - sg))
                        }),
                        Activation::Sigmoid => g.zip_map(y, |d, s| d * s * (T::one() - s)),
                        Activation::Tanh => g.zip_map(y, |d, t| d * (T::one() - t * t)),
                        Activation::Exp => g.zip_map(y, |d, e| d * e),
                        Activation::Abs => g.zip_map(xin, |d, v| {
                            if v > T::zero() {
                                d
                            } else if v < T::zero() {
                                -d
                            } else {
                                T::zero()
                            }
                        }),
                        Activation::Square => g.zip_map(xin, |d, v| d * T::lit(2.0) * v),
                    };
                    emit(*x, gx, &mut grads);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    saved,
                } => {
                    let (dx, dgm, dbt) = kernels::group_norm_backward(
                        self.value(*x),
                        self.value(*gamma),
                        *groups,
                        saved,
                        &g,
                    );
                    emit(*x, dx, &mut grads);
                    emit(*gamma, dgm, &mut grads);
                    emit(*beta, dbt, &mut grads);
                }
                Op::Attention { q, k, v, probs } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                    );
                    emit(*q, dq, &mut grads);
                    emit(*k, dk, &mut grads);
                    emit(*v, dv, &mut grads);
                }
                Op::Mean(x) => {
                    let shape = self.shape(*x);
                    let n = T::from_usize_lossy(shape.iter().product());
                    emit(*x, Tensor::full(shape, g.item() / n), &mut grads);
                }
                Op::CcLoss { pred, grad } => {
                    let s = g.item();
                    emit(*pred, grad.map(|v| v * s), &mut grads);
                }
            }
        }

        let mut params = BTreeMap::new();
        for (&key, &v) in &self.param_vars {
            if let Some(t) = grads[v.0].take() {
                params.insert(key, t);
            }
        }
        let mut vars = HashMap::new();
        for (i, slot) in grads.into_iter().enumerate() {
            if let (Some(t), Op::Leaf) = (slot, &self.nodes[i].op) {
                vars.insert(Var(i), t);
            }
        }
        Gradients { params, vars }
    }
}
