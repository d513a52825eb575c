//! Convolutional VAE with L1, perceptual, adversarial and KL losses, plus a
//! PatchGAN discriminator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::gaussian_kernel;
use crate::nn::{
    load_checkpoint, save_checkpoint, Activation, AdamConfig, Conv2d, Graph, GroupNorm, ParamStore, ResBlock, Tensor,
    Var,
};
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::train_util::{check_finite, crop_origin, sample_indices};

pub const CHECKPOINT_KIND: &str = "vae";
const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub recon: f64,
    pub lpips: f64,
    pub adv: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            lpips: 0.5,
            adv: 0.05,
            kl: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub downsample_factor: usize,
    pub latent_channels: usize,
    /// Channels per resolution level; length is `log2(factor) + 1`.
    pub channels: Vec<usize>,
    pub disc_channels: usize,
    pub weights: LossWeights,
    pub disc_warmup_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub crop: Option<usize>,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            downsample_factor: 4,
            latent_channels: 4,
            channels: vec![64, 128, 256],
            disc_channels: 64,
            weights: LossWeights::default(),
            disc_warmup_steps: 1000,
            batch_size: 64,
            steps: 20_000,
            lr: 1e-4,
            crop: None,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !self.downsample_factor.is_power_of_two() || self.downsample_factor < 2 {
            return bad("downsample_factor must be a power of two >= 2");
        }
        if self.channels.len() != self.levels() + 1 || self.channels.contains(&0) {
            return bad("channels must list one positive width per level");
        }
        if self.latent_channels == 0 || self.batch_size == 0 || self.disc_channels == 0 {
            return bad("latent_channels, batch_size and disc_channels must be positive");
        }
        let w = self.weights;
        if [w.recon, w.lpips, w.adv, w.kl].iter().any(|&v| !(v >= 0.0)) {
            return bad("loss weights must be >= 0");
        }
        if self.disc_warmup_steps > self.steps {
            return bad("disc_warmup_steps must not exceed steps");
        }
        if let Some(c) = self.crop {
            if c % self.downsample_factor != 0 || c < 16 {
                return bad("crop must be a multiple of the downsample factor and >= 16");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv2d,
    levels: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Conv2d,
    mid: ResBlock,
    levels: Vec<(Conv2d, ResBlock)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Encoder `f_enc` and decoder `f_dec`.
#[derive(Clone, Debug)]
pub struct Vae<T: Scalar> {
    pub config: VaeConfig,
    pub store: ParamStore<T>,
    enc: Encoder,
    dec: Decoder,
}

/// Encoder outputs for a batch: `[n, d, h, w]` each.
pub struct Encoded<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    pub z: Tensor<T>,
}

impl<T: Scalar> Vae<T> {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = &mut ParamStore::new();
        let ch = &config.channels;
        let d = config.latent_channels;
        let n = config.levels();
        let enc = Encoder {
            conv_in: Conv2d::same3(s, &mut rng, "enc.conv_in", 1, ch[0]),
            levels: (0..n)
                .map(|i| {
                    (
                        ResBlock::new(s, &mut rng, &format!("enc.l{i}.res"), ch[i], ch[i], None),
                        Conv2d::new(s, &mut rng, &format!("enc.l{i}.down"), ch[i], ch[i + 1], 3, 2, 1),
                    )
                })
                .collect(),
            mid: ResBlock::new(s, &mut rng, "enc.mid", ch[n], ch[n], None),
            norm_out: GroupNorm::new(s, &mut rng, "enc.norm_out", ch[n]),
            conv_out: Conv2d::same3(s, &mut rng, "enc.conv_out", ch[n], 2 * d),
        };
        let dec = Decoder {
            conv_in: Conv2d::same3(s, &mut rng, "dec.conv_in", d, ch[n]),
            mid: ResBlock::new(s, &mut rng, "dec.mid", ch[n], ch[n], None),
            levels: (0..n)
                .rev()
                .map(|i| {
                    (
                        Conv2d::same3(s, &mut rng, &format!("dec.l{i}.up"), ch[i + 1], ch[i]),
                        ResBlock::new(s, &mut rng, &format!("dec.l{i}.res"), ch[i], ch[i], None),
                    )
                })
                .collect(),
            norm_out: GroupNorm::new(s, &mut rng, "dec.norm_out", ch[0]),
            conv_out: Conv2d::same3(s, &mut rng, "dec.conv_out", ch[0], 1),
        };
        let store = std::mem::take(s);
        Ok(Self { config, store, enc, dec })
    }

    fn check_input(&self, shape4: [usize; 4]) -> Result<()> {
        let f = self.config.downsample_factor;
        if shape4[1] != 1 || shape4[2] % f != 0 || shape4[3] % f != 0 || shape4[2] == 0 {
            return Err(Error::InvalidParameter(format!(
                "image batch {shape4:?} needs one channel and sides divisible by {f}"
            )));
        }
        Ok(())
    }

    /// `(mu, logvar)` nodes.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let s = &self.store;
        let e = &self.enc;
        let mut h = e.conv_in.forward(g, s, x);
        for (res, down) in &e.levels {
            h = res.forward(g, s, h, None);
            h = down.forward(g, s, h);
        }
        h = e.mid.forward(g, s, h, None);
        h = e.norm_out.forward(g, s, h);
        h = g.silu(h);
        let out = e.conv_out.forward(g, s, h);
        let d = self.config.latent_channels;
        (g.narrow(out, 0, d), g.narrow(out, d, d))
    }

    /// Image in [0, 1] from latent node `z`.
    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var) -> Var {
        let s = &self.store;
        let d = &self.dec;
        let mut h = d.conv_in.forward(g, s, z);
        h = d.mid.forward(g, s, h, None);
        for (up, res) in &d.levels {
            h = g.upsample2(h);
            h = up.forward(g, s, h);
            h = res.forward(g, s, h, None);
        }
        h = d.norm_out.forward(g, s, h);
        h = g.silu(h);
        let out = d.conv_out.forward(g, s, h);
        g.sigmoid(out)
    }

    /// Encode a `[n, 1, H, W]` batch. With `rng`, `z` is sampled by
    /// reparameterization; without, `z = mu`.
    pub fn encode(&self, x: &Tensor<T>, rng: Option<&mut ChaCha8Rng>) -> Result<Encoded<T>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (mu, logvar) = self.encode_graph(&mut g, xv);
        let mu = g.value(mu).clone();
        let logvar = g.value(logvar).clone();
        let z = match rng {
            Some(rng) => {
                let data = mu
                    .data()
                    .iter()
                    .zip(logvar.data())
                    .map(|(&m, &lv)| {
                        let e: f64 = rng.sample(StandardNormal);
                        let lv = lv.as_f64().clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1);
                        m + T::lit((lv * 0.5).exp() * e)
                    })
                    .collect();
                Tensor::from_vec(mu.shape(), data)?
            }
            None => mu.clone(),
        };
        Ok(Encoded { mu, logvar, z })
    }

    pub fn latent_shape(&self, n: usize, h: usize, w: usize) -> [usize; 4] {
        let f = self.config.downsample_factor;
        [n, self.config.latent_channels, h / f, w / f]
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, d, h, w] = z.shape();
        if d != self.config.latent_channels || h == 0 || w == 0 {
            return Err(Error::shape(&[n, self.config.latent_channels, h, w], &z.shape()));
        }
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let out = self.decode_graph(&mut g, zv);
        Ok(g.value(out).clone())
    }

    /// Deterministic round trip of one image.
    pub fn reconstruct(&self, x: &Raster<T>) -> Result<Raster<T>> {
        let enc = self.encode(&Tensor::from_rasters(&[x])?, None)?;
        Ok(self.decode(&enc.mu)?.raster(0, 0))
    }

    pub fn save(&self, path: &Path, extra: &serde_json::Value) -> Result<()> {
        save_checkpoint(
            path,
            CHECKPOINT_KIND,
            &serde_json::to_value(&self.config)?,
            extra,
            &[&self.store],
        )
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let ck = load_checkpoint::<T>(path, CHECKPOINT_KIND)?;
        let config: VaeConfig = serde_json::from_value(ck.config)?;
        let mut vae = Self::new(config)?;
        vae.store.load_values(ck.tensors)?;
        Ok((vae, ck.extra))
    }
}

/// PatchGAN discriminator: k4 convolutions with strides 2, 2, 2, 1, 1,
/// giving a 70 px receptive field per output logit.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub store: ParamStore<T>,
    convs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15c);
        let mut s = ParamStore::new();
        let c = channels;
        let spec = [(1, c, 2), (c, 2 * c, 2), (2 * c, 4 * c, 2), (4 * c, 8 * c, 1), (8 * c, 1, 1)];
        let convs = spec
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, st))| Conv2d::new(&mut s, &mut rng, &format!("disc.c{i}"), ci, co, 4, st, 1))
            .collect();
        let norms = [2 * c, 4 * c, 8 * c]
            .iter()
            .enumerate()
            .map(|(i, &ch)| GroupNorm::new(&mut s, &mut rng, &format!("disc.n{i}"), ch))
            .collect();
        Self { store: s, convs, norms }
    }

    pub fn receptive_field() -> usize {
        // walk back from one output logit
        [2, 2, 2, 1, 1].iter().rev().fold(1, |rf, &stride| (rf - 1) * stride + 4)
    }

    /// Patch logits for an image batch.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let s = &self.store;
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, s, h);
            if i == self.convs.len() - 1 {
                break;
            }
            if i >= 1 {
                h = self.norms[i - 1].forward(g, s, h);
            }
            h = g.act(h, Activation::LeakyRelu(0.2));
        }
        h
    }

    pub fn logits(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = self.forward(&mut g, xv);
        g.value(out).clone()
    }
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn disc_hinge_loss<T: Scalar>(real_logits: &[T], fake_logits: &[T]) -> T {
    let mean = |v: &[T], f: &dyn Fn(T) -> T| v.iter().map(|&x| f(x)).sum::<T>() / T::from_usize_lossy(v.len().max(1));
    mean(real_logits, &|x| (T::one() - x).max(T::zero())) + mean(fake_logits, &|x| (T::one() + x).max(T::zero()))
}

/// d(loss)/d(logit) for [`disc_hinge_loss`].
pub fn disc_hinge_grad<T: Scalar>(real_logits: &[T], fake_logits: &[T]) -> (Vec<T>, Vec<T>) {
    let nr = T::from_usize_lossy(real_logits.len().max(1));
    let nf = T::from_usize_lossy(fake_logits.len().max(1));
    let dr = real_logits
        .iter()
        .map(|&x| if x < T::one() { -T::one() / nr } else { T::zero() })
        .collect();
    let df = fake_logits
        .iter()
        .map(|&x| if x > -T::one() { T::one() / nf } else { T::zero() })
        .collect();
    (dr, df)
}

/// Hinge loss as graph nodes over real and fake logits.
fn disc_hinge_graph<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var) -> Var {
    let r = g.scale(real, -T::one());
    let r = g.add_scalar(r, T::one());
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(fake, T::one());
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f)
}

/// Loss components for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLossParts {
    pub recon: f64,
    pub lpips: f64,
    pub adv: f64,
    pub kl: f64,
    pub total: f64,
}

/// Fixed multi-scale feature extractor: at each pyramid level the image and
/// its Sobel gradients, then a Gaussian blur and 2x decimation.
pub struct PyramidFeatures<T> {
    sobel: Tensor<T>,
    blur: Tensor<T>,
    pub levels: usize,
}

impl<T: Scalar> PyramidFeatures<T> {
    pub fn new(levels: usize) -> Self {
        let sobel_x = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
        let mut data = vec![0.0; 9];
        data[4] = 1.0;
        data.extend_from_slice(&sobel_x);
        // transpose of sobel_x
        data.extend((0..9).map(|i| sobel_x[(i % 3) * 3 + i / 3] / 1.0));
        let sobel = Tensor::from_vec([3, 1, 3, 3], data.into_iter().map(T::lit).collect()).expect("3x3");
        let k: Vec<f64> = gaussian_kernel(1.0);
        let r = k.len() / 2;
        // 5x5 window of the separable kernel, renormalized
        let k5: Vec<f64> = k[r - 2..=r + 2].to_vec();
        let s: f64 = k5.iter().sum();
        let blur = (0..25).map(|i| T::lit(k5[i / 5] * k5[i % 5] / (s * s))).collect();
        Self {
            sobel,
            blur: Tensor::from_vec([1, 1, 5, 5], blur).expect("5x5"),
            levels,
        }
    }

    fn features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let sobel = g.input(self.sobel.clone());
        let blur = g.input(self.blur.clone());
        let mut out = Vec::with_capacity(self.levels);
        let mut cur = x;
        for level in 0..self.levels {
            out.push(g.conv2d(cur, sobel, None, 1, 1));
            if level + 1 < self.levels {
                cur = g.conv2d(cur, blur, None, 2, 2);
            }
        }
        out
    }

    /// Mean over levels of the feature-space L1 distance.
    pub fn distance(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = g.l1_loss(x, y);
            total = Some(match total {
                Some(t) => g.add(t, d),
                None => d,
            });
        }
        let total = total.expect("at least one level");
        g.scale(total, T::one() / T::from_usize_lossy(self.levels))
    }
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, 1))`, averaged per element.
pub fn kl_divergence<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>) -> T {
    let half = T::lit(0.5);
    mu.data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
        .sum::<T>()
        / T::from_usize_lossy(mu.numel().max(1))
}

fn kl_graph<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Var {
    let m2 = g.act(mu, Activation::Square);
    let ev = g.act(logvar, Activation::Exp);
    let s = g.add(m2, ev);
    let s = g.sub(s, logvar);
    let s = g.add_scalar(s, -T::one());
    let m = g.mean(s);
    g.scale(m, T::lit(0.5))
}

/// All loss terms evaluated outside of training. `disc_logits` is `None`
/// before the discriminator warmup, making the adversarial term zero.
pub fn vae_loss<T: Scalar>(
    x: &Tensor<T>,
    x_tilde: &Tensor<T>,
    mu: &Tensor<T>,
    logvar: &Tensor<T>,
    disc_logits: Option<&Tensor<T>>,
    weights: &LossWeights,
    perceptual: &PyramidFeatures<T>,
) -> Result<VaeLossParts> {
    if x.shape() != x_tilde.shape() {
        return Err(Error::shape(&x.shape(), &x_tilde.shape()));
    }
    if mu.shape() != logvar.shape() {
        return Err(Error::shape(&mu.shape(), &logvar.shape()));
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let xt = g.input(x_tilde.clone());
    let recon = g.l1_loss(xt, xv);
    let lp = perceptual.distance(&mut g, xt, xv);
    let recon = g.value(recon).item().as_f64();
    let lpips = g.value(lp).item().as_f64();
    let kl = kl_divergence(mu, logvar).as_f64();
    let adv = disc_logits.map_or(0.0, |d| {
        -d.data().iter().map(|v| v.as_f64()).sum::<f64>() / d.numel().max(1) as f64
    });
    let total = weights.recon * recon + weights.lpips * lpips + weights.adv * adv + weights.kl * kl;
    for v in [recon, lpips, kl, adv, total] {
        check_finite(0, "vae loss", v)?;
    }
    Ok(VaeLossParts {
        recon,
        lpips,
        adv,
        kl,
        total,
    })
}

fn augment<T: Scalar, R: Rng>(img: &Raster<T>, crop: Option<usize>, rng: &mut R) -> Raster<T> {
    let mut out = match crop {
        Some(c) if img.width() >= c && img.height() >= c => {
            let (x0, y0) = crop_origin(img.width(), img.height(), c, None, 0.0, rng);
            img.crop(x0, y0, c, c)
        }
        _ => img.clone(),
    };
    if rng.random_bool(0.5) {
        out = out.flip_horizontal();
    }
    if rng.random_bool(0.5) {
        out = out.flip_vertical();
    }
    out
}

/// Trained pair plus the per-step loss record.
pub struct VaeTraining<T: Scalar> {
    pub vae: Vae<T>,
    pub disc: Discriminator<T>,
    pub history: Vec<VaeLossParts>,
    pub disc_loss: Vec<f64>,
}

/// Alternating generator / discriminator optimization with random crop and
/// flip augmentation. `on_step` sees every step's losses and the current
/// model (for periodic checkpoints).
pub fn train_vae<T: Scalar>(
    images: &[Raster<T>],
    config: VaeConfig,
    mut on_step: impl FnMut(usize, &VaeLossParts, &Vae<T>),
) -> Result<VaeTraining<T>> {
    if images.is_empty() {
        return Err(Error::InvalidParameter("empty VAE training set".into()));
    }
    let mut vae = Vae::<T>::new(config.clone())?;
    let mut disc = Discriminator::<T>::new(config.disc_channels, config.seed);
    let perceptual = PyramidFeatures::<T>::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let adam = AdamConfig::new(config.lr).with_clip(1.0);
    let w = config.weights;
    let mut history = Vec::with_capacity(config.steps);
    let mut disc_loss = Vec::new();

    for step in 0..config.steps {
        let idx = sample_indices(images.len(), config.batch_size, &mut rng);
        let batch: Vec<Raster<T>> = idx.iter().map(|&i| augment(&images[i], config.crop, &mut rng)).collect();
        let refs: Vec<&Raster<T>> = batch.iter().collect();
        let x = Tensor::from_rasters(&refs)?;
        vae.check_input(x.shape())?;
        let adversarial = step >= config.disc_warmup_steps && w.adv > 0.0;

        let mut g = Graph::new();
        g.freeze(&disc.store);
        let xv = g.input(x.clone());
        let (mu, logvar) = vae.encode_graph(&mut g, xv);
        let eps = {
            let shape = g.shape(mu);
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.sample(StandardNormal))).collect())?
        };
        let eps = g.input(eps);
        let half = g.scale(logvar, T::lit(0.5));
        let std = g.act(half, Activation::Exp);
        let noise = g.mul(std, eps);
        let z = g.add(mu, noise);
        let xt = vae.decode_graph(&mut g, z);
        let recon = g.l1_loss(xt, xv);
        let lp = perceptual.distance(&mut g, xt, xv);
        let kl = kl_graph(&mut g, mu, logvar);
        let mut parts = VaeLossParts {
            recon: g.value(recon).item().as_f64(),
            lpips: g.value(lp).item().as_f64(),
            kl: g.value(kl).item().as_f64(),
            ..Default::default()
        };
        let r = g.scale(recon, T::lit(w.recon));
        let l = g.scale(lp, T::lit(w.lpips));
        let k = g.scale(kl, T::lit(w.kl));
        let mut total = g.add(r, l);
        total = g.add(total, k);
        if adversarial {
            let logits = disc.forward(&mut g, xt);
            let m = g.mean(logits);
            parts.adv = -g.value(m).item().as_f64();
            let a = g.scale(m, T::lit(-w.adv));
            total = g.add(total, a);
        }
        parts.total = g.value(total).item().as_f64();
        check_finite(step, "vae total loss", parts.total)?;
        let grads = g.backward(total);
        vae.store.adam_step(&grads, &adam);
        let fake = g.value(xt).clone();
        drop(g);

        if adversarial {
            let mut dg = Graph::new();
            let real = dg.input(x);
            let fake = dg.input(fake);
            let lr = disc.forward(&mut dg, real);
            let lf = disc.forward(&mut dg, fake);
            let loss = disc_hinge_graph(&mut dg, lr, lf);
            let lv = dg.value(loss).item().as_f64();
            check_finite(step, "discriminator loss", lv)?;
            let grads = dg.backward(loss);
            disc.store.adam_step(&grads, &adam);
            disc_loss.push(lv);
        }
        on_step(step, &parts, &vae);
        history.push(parts);
    }
    Ok(VaeTraining {
        vae,
        disc,
        history,
        disc_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VaeConfig {
        VaeConfig {
            channels: vec![4, 8, 8],
            disc_channels: 4,
            batch_size: 2,
            steps: 4,
            disc_warmup_steps: 2,
            crop: Some(32),
            ..Default::default()
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let vae = Vae::<f32>::new(tiny()).unwrap();
        let x = Tensor::from_rasters(&[&Raster::from_fn(64, 64, |x, y| ((x * y) % 7) as f32 / 7.0)]).unwrap();
        let a = vae.encode(&x, None).unwrap();
        assert_eq!(a.mu.shape(), [1, 4, 16, 16]);
        let b = vae.encode(&x, None).unwrap();
        assert_eq!(a.z, b.z);
        let out = vae.decode(&a.z).unwrap();
        assert_eq!(out.shape(), [1, 1, 64, 64]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(vae.encode(&Tensor::zeros([1, 1, 30, 32]), None).is_err());
        assert!(vae.decode(&Tensor::zeros([1, 3, 16, 16])).is_err());
    }

    #[test]
    fn receptive_field_is_70() {
        assert_eq!(Discriminator::<f32>::receptive_field(), 70);
    }

    #[test]
    fn hinge_values() {
        let ones = vec![1.0f64; 6];
        let neg = vec![-1.0f64; 6];
        assert_eq!(disc_hinge_loss(&ones, &neg), 0.0);
        let zeros = vec![0.0f64; 6];
        assert_eq!(disc_hinge_loss(&zeros, &zeros), 2.0);
    }

    #[test]
    fn loss_fixed_point_and_kl() {
        let p = PyramidFeatures::<f64>::new(3);
        let x = Tensor::from_rasters(&[&Raster::from_fn(16, 16, |x, y| ((x + y) % 4) as f64 / 4.0)]).unwrap();
        let z = Tensor::<f64>::zeros([1, 4, 4, 4]);
        let parts = vae_loss(&x, &x, &z, &z, None, &LossWeights::default(), &p).unwrap();
        assert_eq!(parts, VaeLossParts::default());
        let mu = Tensor::full([1, 4, 4, 4], 1.0);
        assert!((kl_divergence(&mu, &z) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn training_runs_and_repeats() {
        let imgs: Vec<Raster<f32>> = (0..3)
            .map(|k| Raster::from_fn(48, 48, |x, y| ((x + k * y) % 9) as f32 / 9.0))
            .collect();
        let a = train_vae(&imgs, tiny(), |_, _, _| {}).unwrap();
        let b = train_vae(&imgs, tiny(), |_, _, _| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.history[..2].iter().all(|p| p.adv == 0.0));
        assert_eq!(a.disc_loss.len(), 2);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("v.ckpt");
        a.vae.save(&path, &serde_json::json!({"latent_scale": 1.0})).unwrap();
        let (back, extra) = Vae::<f32>::load(&path).unwrap();
        assert_eq!(extra["latent_scale"], 1.0);
        assert_eq!(back.reconstruct(&imgs[0].crop(0, 0, 32, 32)).unwrap(), a.vae.reconstruct(&imgs[0].crop(0, 0, 32, 32)).unwrap());
    }
}
