//! Sketch refinement: a U-Net trained with the region-wise CC loss.

pub mod cc_loss;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    load_checkpoint, save_checkpoint, AdamConfig, Conv2d, Graph, GroupNorm, ParamStore, Tensor, Var,
};
use crate::raster::{BinaryImage, Raster};
use crate::scalar::Scalar;
use crate::train_util::{check_finite, crop_origin, sample_indices};
use cc_loss::{cc_loss, CcLossConfig};

pub const CHECKPOINT_KIND: &str = "refiner";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub cc: CcLossConfig,
    /// Weight of the L1 stabilizer; 0 gives the pure CC objective.
    pub lambda_pix: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Square training crop side; `None` trains on whole images.
    pub crop: Option<usize>,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 32,
            cc: CcLossConfig::default(),
            lambda_pix: 0.1,
            lr: 1e-4,
            batch_size: 16,
            steps: 2000,
            crop: None,
            seed: 0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        self.cc.validate()?;
        if self.depth == 0 || self.base_channels == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("refiner depth, channels and batch must be positive".into()));
        }
        if !(self.lambda_pix >= 0.0 && self.lr > 0.0) {
            return Err(Error::InvalidParameter("refiner lambda_pix must be >= 0 and lr > 0".into()));
        }
        if let Some(c) = self.crop {
            if c % (1 << self.depth) != 0 {
                return Err(Error::InvalidParameter(format!("crop {c} not a multiple of 2^depth")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Level {
    conv_a: Conv2d,
    norm_a: GroupNorm,
    conv_b: Conv2d,
    norm_b: GroupNorm,
}

impl Level {
    fn new<T: Scalar>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c: usize) -> Self {
        Self {
            conv_a: Conv2d::same3(s, rng, &format!("{name}.conv_a"), c_in, c),
            norm_a: GroupNorm::new(s, rng, &format!("{name}.norm_a"), c),
            conv_b: Conv2d::same3(s, rng, &format!("{name}.conv_b"), c, c),
            norm_b: GroupNorm::new(s, rng, &format!("{name}.norm_b"), c),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv_a.forward(g, s, x);
        let h = self.norm_a.forward(g, s, h);
        let h = g.silu(h);
        let h = self.conv_b.forward(g, s, h);
        let h = self.norm_b.forward(g, s, h);
        g.silu(h)
    }
}

#[derive(Clone, Debug)]
struct UNet {
    down: Vec<(Level, Conv2d)>,
    mid: Level,
    up: Vec<(Conv2d, Level)>,
    head: Conv2d,
}

impl UNet {
    fn new<T: Scalar>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, depth: usize, base: usize) -> Self {
        let ch = |i: usize| base << i.min(3);
        let mut down = Vec::new();
        let mut c_in = 1;
        for i in 0..depth {
            let lvl = Level::new(s, rng, &format!("down{i}"), c_in, ch(i));
            let pool = Conv2d::new(s, rng, &format!("down{i}.pool"), ch(i), ch(i), 3, 2, 1);
            down.push((lvl, pool));
            c_in = ch(i);
        }
        let mid = Level::new(s, rng, "mid", c_in, ch(depth));
        let mut up = Vec::new();
        let mut c_cur = ch(depth);
        for i in (0..depth).rev() {
            let reduce = Conv2d::same3(s, rng, &format!("up{i}.reduce"), c_cur, ch(i));
            let lvl = Level::new(s, rng, &format!("up{i}"), 2 * ch(i), ch(i));
            up.push((reduce, lvl));
            c_cur = ch(i);
        }
        let head = Conv2d::pointwise(s, rng, "head", base, 1);
        Self { down, mid, up, head }
    }

    /// Logits for `[n, 1, h, w]` input, sides divisible by `2^depth`.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Var {
        let mut skips = Vec::new();
        let mut h = x;
        for (lvl, pool) in &self.down {
            h = lvl.forward(g, s, h);
            skips.push(h);
            h = pool.forward(g, s, h);
        }
        h = self.mid.forward(g, s, h);
        for (reduce, lvl) in &self.up {
            let u = g.upsample2(h);
            let u = reduce.forward(g, s, u);
            let skip = skips.pop().expect("matching skip");
            let c = g.concat(u, skip);
            h = lvl.forward(g, s, c);
        }
        self.head.forward(g, s, h)
    }
}

/// Trained refinement network `f_u`.
#[derive(Clone, Debug)]
pub struct Refiner<T: Scalar> {
    pub config: RefinerConfig,
    pub store: ParamStore<T>,
    net: UNet,
}

/// Per-step training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinerHistory {
    /// Batch objective per step.
    pub loss: Vec<f64>,
    /// Mean CC loss on the fixed evaluation batch, before training and after.
    pub eval_cc_initial: f64,
    pub eval_cc_final: f64,
}

impl RefinerHistory {
    /// `(L0 - Lf) / |L0|` on the evaluation batch.
    pub fn cc_improvement(&self) -> f64 {
        (self.eval_cc_initial - self.eval_cc_final) / self.eval_cc_initial.abs().max(1e-12)
    }
}

impl<T: Scalar> Refiner<T> {
    pub fn new(config: RefinerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, &mut rng, config.depth, config.base_channels);
        Ok(Self { config, store, net })
    }

    fn multiple(&self) -> usize {
        1 << self.config.depth
    }

    /// Soft output in (0, 1) for a `[n, 1, h, w]` batch with divisible sides.
    fn forward_batch(&self, g: &mut Graph<T>, x: Var) -> Var {
        let logits = self.net.forward(g, &self.store, x);
        g.sigmoid(logits)
    }

    /// `S = f_u(S*)`: the soft sketch and its 0.5 threshold. Inputs whose sides
    /// are not multiples of `2^depth` are reflect-padded and the output cropped.
    pub fn refine(&self, sketch: &Raster<T>) -> Result<(Raster<T>, BinaryImage)> {
        sketch.ensure_finite()?;
        let (w, h) = sketch.dims();
        let m = self.multiple();
        let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
        let padded = sketch.pad_reflect_to(pw, ph);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rasters(&[&padded])?);
        let y = self.forward_batch(&mut g, x);
        let soft = g.value(y).raster(0, 0).crop(0, 0, w, h);
        let bin = soft.threshold(T::lit(0.5));
        Ok((soft, bin))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            CHECKPOINT_KIND,
            &serde_json::to_value(&self.config)?,
            &serde_json::Value::Null,
            &[&self.store],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint::<T>(path, CHECKPOINT_KIND)?;
        let config: RefinerConfig = serde_json::from_value(ck.config)?;
        let mut model = Self::new(config)?;
        model.store.load_values(ck.tensors)?;
        Ok(model)
    }
}

/// `cc_loss + lambda_pix * mean|S_pred - E|`.
pub fn refiner_loss<T: Scalar>(pred: &Raster<T>, edge: &Raster<T>, cfg: &CcLossConfig, lambda_pix: f64) -> Result<T> {
    let cc = cc_loss(pred, edge, cfg)?;
    if lambda_pix == 0.0 {
        return Ok(cc);
    }
    let l1 = pred
        .data()
        .iter()
        .zip(edge.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<T>()
        / T::from_usize_lossy(pred.len());
    Ok(cc + T::lit(lambda_pix) * l1)
}

/// Training pair `(S*, E)` as {0, 1}-valued rasters.
pub type SketchPair<T> = (Raster<T>, Raster<T>);

fn crop_pair<T: Scalar, R: Rng>(pair: &SketchPair<T>, size: Option<usize>, rng: &mut R) -> SketchPair<T> {
    let (s, e) = pair;
    let Some(size) = size else { return pair.clone() };
    let (w, h) = s.dims();
    if w < size || h < size {
        let (pw, ph) = (w.max(size), h.max(size));
        return (s.pad_to(pw, ph, T::zero()), e.pad_to(pw, ph, T::zero()));
    }
    let focus = e.threshold(T::lit(0.5)).centroid();
    let (x0, y0) = crop_origin(w, h, size, focus, size as f64 / 4.0, rng);
    (s.crop(x0, y0, size, size), e.crop(x0, y0, size, size))
}

fn to_batch<T: Scalar>(items: &[SketchPair<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let s: Vec<&Raster<T>> = items.iter().map(|p| &p.0).collect();
    let e: Vec<&Raster<T>> = items.iter().map(|p| &p.1).collect();
    Ok((Tensor::from_rasters(&s)?, Tensor::from_rasters(&e)?))
}

fn eval_cc<T: Scalar>(model: &Refiner<T>, batch: &[SketchPair<T>]) -> Result<f64> {
    let mut total = 0.0;
    for (s, e) in batch {
        let (soft, _) = model.refine(s)?;
        total += cc_loss(&soft, e, &model.config.cc)?.as_f64();
    }
    Ok(total / batch.len() as f64)
}

/// Adam on `refiner_loss` over random (cropped) pairs. Training stops with
/// `Diverged` on a non-finite loss.
pub fn train_refiner<T: Scalar>(
    pairs: &[SketchPair<T>],
    config: RefinerConfig,
    mut on_step: impl FnMut(usize, f64, &Refiner<T>),
) -> Result<(Refiner<T>, RefinerHistory)> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("no training pairs".into()));
    }
    for (s, e) in pairs {
        s.ensure_same_dims(e)?;
    }
    let mut model = Refiner::<T>::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let adam = AdamConfig::new(config.lr).with_clip(1.0);

    let eval_idx = sample_indices(pairs.len(), config.batch_size.min(pairs.len()), &mut rng);
    let eval_batch: Vec<SketchPair<T>> = eval_idx
        .iter()
        .map(|&i| crop_pair(&pairs[i], config.crop, &mut rng))
        .collect();
    let mut history = RefinerHistory {
        eval_cc_initial: eval_cc(&model, &eval_batch)?,
        ..Default::default()
    };

    for step in 0..config.steps {
        let idx = sample_indices(pairs.len(), config.batch_size, &mut rng);
        let items: Vec<SketchPair<T>> = idx.iter().map(|&i| crop_pair(&pairs[i], config.crop, &mut rng)).collect();
        let items = if config.crop.is_none() {
            let m = model.multiple();
            items
                .into_iter()
                .map(|(s, e)| {
                    let (w, h) = s.dims();
                    let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
                    (s.pad_to(pw, ph, T::zero()), e.pad_to(pw, ph, T::zero()))
                })
                .collect()
        } else {
            items
        };
        let (xs, es) = to_batch(&items)?;
        let mut g = Graph::new();
        let x = g.input(xs);
        let y = model.forward_batch(&mut g, x);
        let mut loss = g.cc_loss(y, &es, &config.cc);
        if config.lambda_pix > 0.0 {
            let e = g.input(es);
            let l1 = g.l1_loss(y, e);
            let l1 = g.scale(l1, T::lit(config.lambda_pix));
            loss = g.add(loss, l1);
        }
        let lv = g.value(loss).item().as_f64();
        check_finite(step, "refiner loss", lv)?;
        let grads = g.backward(loss);
        model.store.adam_step(&grads, &adam);
        history.loss.push(lv);
        on_step(step, lv, &model);
    }
    history.eval_cc_final = eval_cc(&model, &eval_batch)?;
    Ok((model, history))
}
