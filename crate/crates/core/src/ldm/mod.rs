//! Sketch- and reference-conditioned latent diffusion.

pub mod model;
pub mod schedule;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, AdamConfig, Graph, ParamStore, Tensor};
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::train_util::{check_finite, crop_origin, sample_indices};
pub use model::{ConditionBundle, ConditionInputs, Denoiser, ModelConfig};
pub use schedule::{NoiseSchedule, ScheduleConfig};

pub const CHECKPOINT_KIND: &str = "ldm";
const X0_CLIP: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdmConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Square latent training crop; `None` trains on whole latents.
    pub crop_latent: Option<usize>,
    /// Multiplier bringing VAE means to roughly unit variance.
    pub latent_scale: f64,
    pub seed: u64,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            lr: 1e-5,
            batch_size: 20,
            steps: 40_000,
            crop_latent: None,
            latent_scale: 1.0,
            seed: 0,
        }
    }
}

impl LdmConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        NoiseSchedule::new(&self.schedule)?;
        if !(self.lr > 0.0 && self.latent_scale > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidParameter("lr, latent_scale and batch_size must be positive".into()));
        }
        if let Some(c) = self.crop_latent {
            if c == 0 || c % self.model.latent_multiple() != 0 {
                return Err(Error::InvalidParameter(format!("latent crop {c} must be a positive multiple of {}", self.model.latent_multiple())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Deterministic DDIM (eta = 0).
    #[default]
    Ddim,
    /// Ancestral sampling with the posterior variance (eta = 1).
    Ancestral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub kind: SamplerKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            kind: SamplerKind::Ddim,
        }
    }
}

/// Latents kept fixed outside `mask` (1 = generate) while sampling.
pub struct KnownRegion<'a, T> {
    pub z: &'a Tensor<T>,
    pub mask: &'a Tensor<T>,
}

/// One training example: scaled latent plus image-resolution conditions.
#[derive(Clone, Debug)]
pub struct LdmExample<T> {
    pub latent: Tensor<T>,
    pub sketch: Raster<T>,
    pub reference: Raster<T>,
    pub spacing: [f64; 3],
    /// Image-space point training crops are centred near.
    pub focus: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Ldm<T: Scalar> {
    pub config: LdmConfig,
    pub store: ParamStore<T>,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

/// `mean |eps - eps_hat|`, the training objective.
pub fn ldm_objective<T: Scalar>(eps: &Tensor<T>, eps_hat: &Tensor<T>) -> T {
    eps.data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<T>()
        / T::from_usize_lossy(eps.numel().max(1))
}

fn gaussian<T: Scalar>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.sample(StandardNormal))).collect()).expect("noise size")
}

/// Descending timesteps visited by an `steps`-step sampler.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidParameter(format!("sampler steps {steps} must be in 1..={total}")));
    }
    Ok((0..steps).rev().map(|i| (i + 1) * total / steps - 1).collect())
}

impl<T: Scalar> Ldm<T> {
    pub fn new(config: LdmConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let denoiser = Denoiser::new(&mut store, &config.model, config.seed)?;
        let schedule = NoiseSchedule::new(&config.schedule)?;
        Ok(Self {
            config,
            store,
            denoiser,
            schedule,
        })
    }

    pub fn predict_noise(&self, z_t: &Tensor<T>, ts: &[usize], cond: Option<&ConditionInputs<T>>) -> Result<Tensor<T>> {
        self.denoiser.predict_noise(&self.store, z_t, ts, cond)
    }

    /// Objective value and graph for one batch; used by training and tests.
    pub fn batch_loss(
        &self,
        z0: &Tensor<T>,
        cond: &ConditionInputs<T>,
        ts: &[usize],
        eps: &Tensor<T>,
    ) -> Result<(Graph<T>, crate::nn::Var, Tensor<T>)> {
        self.denoiser.check_latent(z0.shape())?;
        let z_t = self.schedule.forward_noise_batch(z0, ts, eps)?;
        let [_, _, h, w] = z0.shape();
        let mut g = Graph::new();
        let bundle = self.denoiser.condition(&mut g, &self.store, cond, (h, w))?;
        let zv = g.input(z_t);
        let pred = self.denoiser.predict_noise_graph(&mut g, &self.store, zv, ts, Some(&bundle));
        let target = g.input(eps.clone());
        let loss = g.l1_loss(pred, target);
        let eps_hat = g.value(pred).clone();
        Ok((g, loss, eps_hat))
    }

    /// Reverse process from `Z_T ~ N(0, I)`. With `known`, latents outside the
    /// mask are replaced after every step by the known latent noised to the
    /// matching level (and by the known latent itself at the end).
    pub fn sample(
        &self,
        cond: &ConditionInputs<T>,
        shape: [usize; 4],
        sampler: &SamplerConfig,
        rng: &mut ChaCha8Rng,
        known: Option<KnownRegion<'_, T>>,
    ) -> Result<Tensor<T>> {
        self.denoiser.check_latent(shape)?;
        let ts = sampling_timesteps(self.schedule.len(), sampler.steps)?;
        if let Some(k) = &known {
            if k.z.shape() != shape {
                return Err(Error::shape(&shape, &k.z.shape()));
            }
            if k.mask.shape() != [shape[0], 1, shape[2], shape[3]] {
                return Err(Error::shape(&[shape[0], 1, shape[2], shape[3]], &k.mask.shape()));
            }
        }
        let eta = match sampler.kind {
            SamplerKind::Ddim => 0.0,
            SamplerKind::Ancestral => 1.0,
        };
        let mut z = gaussian::<T>(shape, rng);
        let n = shape[0];
        for (i, &t) in ts.iter().enumerate() {
            let a_t = self.schedule.alpha_bar(t);
            let a_prev = ts.get(i + 1).map_or(1.0, |&tp| self.schedule.alpha_bar(tp));
            let eps = self.predict_noise(&z, &vec![t; n], Some(cond))?;
            let sigma = eta * ((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)).max(0.0).sqrt();
            let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
            let noise = if sigma > 0.0 { Some(gaussian::<T>(shape, rng)) } else { None };
            let (sa, sb) = (a_t.sqrt(), (1.0 - a_t).sqrt());
            let mut next = Vec::with_capacity(z.numel());
            for (k, (&zv, &ev)) in z.data().iter().zip(eps.data()).enumerate() {
                let (zv, ev) = (zv.as_f64(), ev.as_f64());
                let x0 = ((zv - sb * ev) / sa).clamp(-X0_CLIP, X0_CLIP);
                let mut v = a_prev.sqrt() * x0 + dir * ev;
                if let Some(nz) = &noise {
                    v += sigma * nz.data()[k].as_f64();
                }
                next.push(T::lit(v));
            }
            z = Tensor::from_vec(shape, next)?;
            if let Some(k) = &known {
                let fresh = gaussian::<T>(shape, rng);
                let kz = if i + 1 < ts.len() {
                    self.schedule.forward_noise(k.z, ts[i + 1], &fresh)?
                } else {
                    k.z.clone()
                };
                blend(&mut z, &kz, k.mask);
            }
        }
        Ok(z)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            CHECKPOINT_KIND,
            &serde_json::to_value(&self.config)?,
            &serde_json::json!({ "alpha_bar_last": self.schedule.alpha_bar(self.schedule.len() - 1) }),
            &[&self.store],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint::<T>(path, CHECKPOINT_KIND)?;
        let config: LdmConfig = serde_json::from_value(ck.config)?;
        let mut m = Self::new(config)?;
        m.store.load_values(ck.tensors)?;
        Ok(m)
    }
}

/// `z = mask * z + (1 - mask) * known`, mask broadcast over channels.
fn blend<T: Scalar>(z: &mut Tensor<T>, known: &Tensor<T>, mask: &Tensor<T>) {
    let [n, c, h, w] = z.shape();
    let hw = h * w;
    let kd = known.data().to_vec();
    let md = mask.data();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for p in 0..hw {
                let m = md[b * hw + p];
                let zd = &mut z.data_mut()[off + p];
                *zd = m * *zd + (T::one() - m) * kd[off + p];
            }
        }
    }
}

fn crop_example<T: Scalar>(
    ex: &LdmExample<T>,
    crop: Option<usize>,
    factor: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor<T>, Raster<T>, Raster<T>) {
    let [_, _, lh, lw] = ex.latent.shape();
    match crop {
        Some(c) if c <= lh && c <= lw => {
            let focus = ex.focus.map(|(x, y)| (x / factor as f64, y / factor as f64));
            let (x0, y0) = crop_origin(lw, lh, c, focus, c as f64 / 4.0, rng);
            let (ix, iy, is) = (x0 * factor, y0 * factor, c * factor);
            (
                ex.latent.crop(x0, y0, c, c),
                ex.sketch.crop(ix, iy, is, is),
                ex.reference.crop(ix, iy, is, is),
            )
        }
        _ => (ex.latent.clone(), ex.sketch.clone(), ex.reference.clone()),
    }
}

/// Per-step L1 objective values.
pub type LdmHistory = Vec<f64>;

/// Joint training of backbone, control branch and both condition encoders
/// on `mean |eps - eps_hat|` with uniformly drawn timesteps.
pub fn train_ldm<T: Scalar>(
    examples: &[LdmExample<T>],
    config: LdmConfig,
    mut on_step: impl FnMut(usize, f64, &Ldm<T>),
) -> Result<(Ldm<T>, LdmHistory)> {
    if examples.is_empty() {
        return Err(Error::InvalidParameter("empty LDM training set".into()));
    }
    let f = config.model.downsample_factor;
    for ex in examples {
        let [_, _, h, w] = ex.latent.shape();
        if ex.sketch.dims() != (w * f, h * f) || ex.reference.dims() != (w * f, h * f) {
            return Err(Error::shape(&[w * f, h * f], &[ex.sketch.width(), ex.sketch.height()]));
        }
    }
    let mut ldm = Ldm::<T>::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0003);
    let adam = AdamConfig::new(config.lr).with_clip(1.0);
    let total_t = ldm.schedule.len();
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = sample_indices(examples.len(), config.batch_size, &mut rng);
        let mut lat = Vec::with_capacity(idx.len());
        let mut sk = Vec::with_capacity(idx.len());
        let mut rf = Vec::with_capacity(idx.len());
        let mut spacing = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (l, s, r) = crop_example(&examples[i], config.crop_latent, f, &mut rng);
            lat.push(l);
            sk.push(s);
            rf.push(r);
            spacing.push(examples[i].spacing);
        }
        let z0 = Tensor::cat_batch(&lat)?;
        let cond = ConditionInputs {
            sketch: Tensor::from_rasters(&sk.iter().collect::<Vec<_>>())?,
            reference: Tensor::from_rasters(&rf.iter().collect::<Vec<_>>())?,
            spacing,
        };
        let ts: Vec<usize> = (0..idx.len()).map(|_| rng.random_range(0..total_t)).collect();
        let eps = gaussian::<T>(z0.shape(), &mut rng);
        let (g, loss, _) = ldm.batch_loss(&z0, &cond, &ts, &eps)?;
        let lv = g.value(loss).item().as_f64();
        check_finite(step, "ldm loss", lv)?;
        let grads = g.backward(loss);
        drop(g);
        ldm.store.adam_step(&grads, &adam);
        history.push(lv);
        on_step(step, lv, &ldm);
    }
    Ok((ldm, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> LdmConfig {
        LdmConfig {
            model: ModelConfig {
                base_channels: 8,
                channel_mult: vec![1, 2],
                cond_channels: 4,
                ..Default::default()
            },
            batch_size: 2,
            steps: 3,
            lr: 1e-3,
            ..Default::default()
        }
    }

    fn cond(n: usize, side: usize, seed: u64) -> ConditionInputs<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConditionInputs {
            sketch: Tensor::from_vec([n, 1, side, side], (0..n * side * side).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
            reference: Tensor::from_vec([n, 1, side, side], (0..n * side * side).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
            spacing: vec![[0.8, 1.1, 3.0]; n],
        }
    }

    #[test]
    fn zero_convolutions_make_conditioning_inert() {
        let ldm = Ldm::<f64>::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = gaussian::<f64>([2, 4, 8, 8], &mut rng);
        let c = cond(2, 32, 2);
        let a = ldm.predict_noise(&z, &[10, 500], Some(&c)).unwrap();
        let b = ldm.predict_noise(&z, &[10, 500], Some(&c.zeros_like())).unwrap();
        assert_eq!(a.shape(), z.shape());
        let diff = a.zip_map(&b, |x, y| x - y).max_abs();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn objective_is_l1() {
        let ldm = Ldm::<f64>::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = gaussian::<f64>([2, 4, 8, 8], &mut rng);
        let eps = gaussian::<f64>([2, 4, 8, 8], &mut rng);
        let (g, loss, eps_hat) = ldm.batch_loss(&z0, &cond(2, 32, 4), &[5, 900], &eps).unwrap();
        let l = g.value(loss).item();
        let l1 = ldm_objective(&eps, &eps_hat);
        let l2 = eps.zip_map(&eps_hat, |a, b| (a - b) * (a - b)).data().iter().sum::<f64>() / eps.numel() as f64;
        assert!((l - l1).abs() < 1e-12);
        assert!((l - l2).abs() > 1e-3);
    }

    #[test]
    fn sampler_steps_and_determinism() {
        assert_eq!(sampling_timesteps(1000, 1).unwrap(), vec![999]);
        assert_eq!(sampling_timesteps(1000, 50).unwrap()[0], 999);
        assert_eq!(*sampling_timesteps(1000, 50).unwrap().last().unwrap(), 19);
        assert!(sampling_timesteps(1000, 1001).is_err());
        let ldm = Ldm::<f64>::new(tiny_config()).unwrap();
        let c = cond(1, 32, 5);
        let sc = SamplerConfig { steps: 4, ..Default::default() };
        let a = ldm.sample(&c, [1, 4, 8, 8], &sc, &mut ChaCha8Rng::seed_from_u64(9), None).unwrap();
        let b = ldm.sample(&c, [1, 4, 8, 8], &sc, &mut ChaCha8Rng::seed_from_u64(9), None).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        let one = SamplerConfig { steps: 1, kind: SamplerKind::Ancestral };
        assert!(ldm.sample(&c, [1, 4, 8, 8], &one, &mut ChaCha8Rng::seed_from_u64(9), None).unwrap().is_finite());
        let too_many = SamplerConfig { steps: 1001, ..Default::default() };
        assert!(ldm.sample(&c, [1, 4, 8, 8], &too_many, &mut ChaCha8Rng::seed_from_u64(9), None).is_err());
    }

    #[test]
    fn known_region_is_restored_exactly() {
        let ldm = Ldm::<f64>::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zk = gaussian::<f64>([1, 4, 8, 8], &mut rng);
        let mask = Tensor::from_vec([1, 1, 8, 8], (0..64).map(|i| ((i % 8) >= 4) as u8 as f64).collect()).unwrap();
        let sc = SamplerConfig { steps: 3, ..Default::default() };
        let out = ldm
            .sample(&cond(1, 32, 7), [1, 4, 8, 8], &sc, &mut rng, Some(KnownRegion { z: &zk, mask: &mask }))
            .unwrap();
        for c in 0..4 {
            for y in 0..8 {
                for x in 0..4 {
                    let i = (c * 8 + y) * 8 + x;
                    assert_eq!(out.data()[i], zk.data()[i]);
                }
            }
        }
    }

    #[test]
    fn training_is_reproducible_and_checkpoints_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ex: Vec<LdmExample<f32>> = (0..3)
            .map(|k| LdmExample {
                latent: gaussian::<f32>([1, 4, 8, 8], &mut rng),
                sketch: Raster::from_fn(32, 32, |x, y| ((x + y + k) % 7 == 0) as u8 as f32),
                reference: Raster::from_fn(32, 32, |x, _| x as f32 / 32.0),
                spacing: [1.0, 1.0, 2.5],
                focus: Some((16.0, 16.0)),
            })
            .collect();
        let cfg = LdmConfig { crop_latent: Some(4), ..tiny_config() };
        let (_, h1) = train_ldm(&ex, cfg.clone(), |_, _, _| {}).unwrap();
        let (m, h2) = train_ldm(&ex, cfg, |_, _, _| {}).unwrap();
        assert_eq!(h1, h2);
        assert!(h1.iter().all(|v| v.is_finite()));
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("l.ckpt");
        m.save(&p).unwrap();
        let back = Ldm::<f32>::load(&p).unwrap();
        let z = gaussian::<f32>([1, 4, 8, 8], &mut rng);
        let c = ConditionInputs {
            sketch: Tensor::from_rasters(&[&ex[0].sketch]).unwrap(),
            reference: Tensor::from_rasters(&[&ex[0].reference]).unwrap(),
            spacing: vec![ex[0].spacing],
        };
        assert_eq!(back.predict_noise(&z, &[100], Some(&c)).unwrap(), m.predict_noise(&z, &[100], Some(&c)).unwrap());
        assert!(train_ldm::<f32>(&[], tiny_config(), |_, _, _| {}).is_err());
    }
}
