//! Linear-beta noise schedule and the closed-form forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Cumulative `alpha_bar[t] = prod_{s <= t} (1 - beta_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.timesteps;
        if t < 2 || !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::InvalidParameter(format!("bad noise schedule {cfg:?}")));
        }
        let mut acc = 1.0;
        let alpha_bar = (0..t)
            .map(|i| {
                let beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Ok(Self { alpha_bar })
    }

    /// Arbitrary values in [0, 1]; used to probe the endpoint identities.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidParameter("alpha_bar values must lie in [0, 1]".into()));
        }
        Ok(Self { alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::InvalidParameter(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }

    /// `Z_t = sqrt(alpha_bar[t]) Z + sqrt(1 - alpha_bar[t]) eps`.
    pub fn forward_noise<T: Scalar>(&self, z: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        if z.shape() != eps.shape() {
            return Err(Error::shape(&z.shape(), &eps.shape()));
        }
        let a = self.alpha_bar[t];
        let (sa, sb) = (T::lit(a.sqrt()), T::lit((1.0 - a).sqrt()));
        Ok(z.zip_map(eps, |zv, ev| sa * zv + sb * ev))
    }

    /// Per-item noising for a batch with one timestep per item.
    pub fn forward_noise_batch<T: Scalar>(&self, z: &Tensor<T>, ts: &[usize], eps: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = z.shape();
        if ts.len() != n {
            return Err(Error::InvalidParameter(format!("{} timesteps for batch of {n}", ts.len())));
        }
        let mut items = Vec::with_capacity(n);
        for (i, &t) in ts.iter().enumerate() {
            items.push(self.forward_noise(&z.batch_slice(i, 1), t, &eps.batch_slice(i, 1))?);
        }
        let out = Tensor::cat_batch(&items)?;
        debug_assert_eq!(out.shape(), [n, c, h, w]);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_shape() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.len(), 1000);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!((s.alpha_bar(0) - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(s.alpha_bar(999) < 0.01);
    }

    #[test]
    fn endpoints_are_exact() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.0]).unwrap();
        let z = Tensor::from_vec([1, 1, 1, 3], vec![0.3f64, -1.2, 2.5]).unwrap();
        let e = Tensor::from_vec([1, 1, 1, 3], vec![-0.7f64, 0.1, 1.9]).unwrap();
        assert_eq!(s.forward_noise(&z, 0, &e).unwrap(), z);
        assert_eq!(s.forward_noise(&z, 1, &e).unwrap(), e);
        assert!(s.forward_noise(&z, 2, &e).is_err());
    }
}
