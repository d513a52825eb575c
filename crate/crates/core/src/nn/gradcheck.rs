//! Central-difference checks of every backward rule, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Activation, Graph, Var};
use super::layers::{AttentionBlock, ResBlock};
use super::params::{AdamConfig, ParamStore};
use super::tensor::Tensor;
use crate::refiner::cc_loss::CcLossConfig;

fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Fixed random projection so the scalar output depends on every element.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(g.shape(x), &mut rng);
    let w = g.input(w);
    let p = g.mul(x, w);
    g.mean(p)
}

fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var, tol: f64) {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let h = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.var(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1.0 + numeric.abs());
            assert!(err < tol, "input {k} elem {i}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn conv_strided_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor([2, 3, 7, 6], &mut rng);
    let w = rand_tensor([4, 3, 3, 3], &mut rng);
    let b = rand_tensor([1, 4, 1, 1], &mut rng);
    check(
        vec![x, w, b],
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
            project(g, y, 9)
        },
        1e-6,
    );
}

#[test]
fn conv_pointwise_and_k4() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor([1, 2, 8, 8], &mut rng);
    let w1 = rand_tensor([3, 2, 1, 1], &mut rng);
    let w4 = rand_tensor([2, 3, 4, 4], &mut rng);
    check(
        vec![x, w1, w4],
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 0);
            let z = g.conv2d(y, v[2], None, 2, 1);
            project(g, z, 3)
        },
        1e-6,
    );
}

#[test]
fn elementwise_and_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor([2, 2, 3, 3], &mut rng);
    let b = rand_tensor([2, 2, 3, 3], &mut rng);
    let c = rand_tensor([2, 2, 1, 1], &mut rng);
    for act in [
        Activation::Silu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Exp,
        Activation::Square,
        Activation::LeakyRelu(0.2),
        Activation::Relu,
        Activation::Abs,
    ] {
        check(
            vec![a.clone(), b.clone(), c.clone()],
            |g, v| {
                let s = g.add(v[0], v[1]);
                let d = g.sub(s, v[1]);
                let m = g.mul(d, v[1]);
                let m = g.add_channel(m, v[2]);
                let m = g.scale(m, 0.7);
                let m = g.add_scalar(m, 0.1);
                let y = g.act(m, act);
                project(g, y, 4)
            },
            1e-5,
        );
    }
}

#[test]
fn concat_narrow_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor([2, 2, 3, 4], &mut rng);
    let b = rand_tensor([2, 3, 3, 4], &mut rng);
    check(
        vec![a, b],
        |g, v| {
            let c = g.concat(v[0], v[1]);
            let n = g.narrow(c, 1, 3);
            let u = g.upsample2(n);
            project(g, u, 5)
        },
        1e-6,
    );
}

#[test]
fn group_norm_and_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor([2, 4, 3, 3], &mut rng);
    let gm = rand_tensor([1, 4, 1, 1], &mut rng);
    let bt = rand_tensor([1, 4, 1, 1], &mut rng);
    check(
        vec![x.clone(), gm, bt],
        |g, v| {
            let y = g.group_norm(v[0], v[1], v[2], 2);
            project(g, y, 6)
        },
        1e-5,
    );
    let q = rand_tensor([2, 3, 2, 3], &mut rng);
    let k = rand_tensor([2, 3, 2, 3], &mut rng);
    let vv = rand_tensor([2, 3, 2, 3], &mut rng);
    check(
        vec![q, k, vv],
        |g, v| {
            let y = g.attention(v[0], v[1], v[2]);
            project(g, y, 7)
        },
        1e-6,
    );
}

#[test]
fn l1_and_cc_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor([2, 1, 16, 16], &mut rng);
    let t = rand_tensor([2, 1, 16, 16], &mut rng);
    let cfg = CcLossConfig::new(4, 2);
    check(
        vec![a.clone(), t.clone()],
        |g, v| g.l1_loss(v[0], v[1]),
        1e-5,
    );
    check(
        vec![a],
        move |g, v| g.cc_loss(v[0], &t, &cfg),
        1e-5,
    );
}

#[test]
fn param_gradients_through_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let rb = ResBlock::new(&mut store, &mut rng, "rb", 2, 4, Some(3));
    let at = AttentionBlock::new(&mut store, &mut rng, "at", 4);
    let x = rand_tensor([1, 2, 4, 4], &mut rng);
    let e = rand_tensor([1, 3, 1, 1], &mut rng);
    let run = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let ev = g.input(e.clone());
        let h = rb.forward(&mut g, store, xv, Some(ev));
        let h = at.forward(&mut g, store, h);
        let out = project(&mut g, h, 8);
        (g, out)
    };
    let (g, out) = run(&store);
    let grads = g.backward(out);
    let h = 1e-6;
    let ids: Vec<_> = store.iter().map(|p| p.name.clone()).collect();
    for name in ids {
        let id = store.find(&name).unwrap();
        let analytic = grads.param(&store, id).unwrap().clone();
        for i in (0..store.value(id).numel()).step_by(5) {
            let mut s = store.clone();
            s.value_mut(id).data_mut()[i] += h;
            let (gp, op) = run(&s);
            let mut s = store.clone();
            s.value_mut(id).data_mut()[i] -= h;
            let (gm, om) = run(&s);
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - numeric).abs() < 1e-6 * (1.0 + numeric.abs()), "{name}[{i}]: {a} vs {numeric}");
        }
    }
}

#[test]
fn frozen_store_gets_no_gradient_and_adam_descends() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let conv = super::layers::Conv2d::same3(&mut store, &mut rng, "c", 1, 1);
    let x = rand_tensor([1, 1, 6, 6], &mut rng);
    let target = Tensor::zeros([1, 1, 6, 6]);
    let loss_of = |store: &ParamStore<f64>, freeze: bool| {
        let mut g = Graph::new();
        if freeze {
            g.freeze(store);
        }
        let xv = g.input(x.clone());
        let y = conv.forward(&mut g, store, xv);
        let t = g.input(target.clone());
        let l = g.l1_loss(y, t);
        (g.value(l).item(), g.backward(l))
    };
    let (_, frozen) = loss_of(&store, true);
    assert!(frozen.param(&store, conv.weight).is_none());
    let (l0, _) = loss_of(&store, false);
    let cfg = AdamConfig::new(1e-2);
    for _ in 0..50 {
        let (_, grads) = loss_of(&store, false);
        store.adam_step(&grads, &cfg);
    }
    let (l1, _) = loss_of(&store, false);
    assert!(l1 < l0 * 0.5, "{l0} -> {l1}");
}
