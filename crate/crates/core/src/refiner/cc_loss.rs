//! Region-wise cross-correlation loss between grid-local means.
//!
//! The (zero-padded) image is tiled into `R x R` regions. Inside each region,
//! `N x N` grids placed every `stride` pixels are averaged, and the Pearson
//! correlation between the prediction's and target's grid means is taken.
//! The loss is the negated sum of those correlations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcLossConfig {
    /// Grid side `N`.
    pub grid_size: usize,
    /// Regions per image side `R`.
    pub regions_per_side: usize,
    /// Added under the square root of the correlation denominator.
    pub epsilon: f64,
    /// Grid placement step; equal to `grid_size` for non-overlapping grids.
    pub grid_stride: usize,
}

impl Default for CcLossConfig {
    fn default() -> Self {
        Self {
            grid_size: 4,
            regions_per_side: 4,
            epsilon: 1e-8,
            grid_stride: 4,
        }
    }
}

impl CcLossConfig {
    pub fn new(grid_size: usize, regions_per_side: usize) -> Self {
        Self {
            grid_size,
            regions_per_side,
            grid_stride: grid_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 || self.regions_per_side < 1 || self.grid_stride < 1 || self.epsilon < 0.0 {
            return Err(Error::InvalidParameter(format!("bad CC loss config {self:?}")));
        }
        Ok(())
    }

    pub fn region_count(&self) -> usize {
        self.regions_per_side * self.regions_per_side
    }

    fn padded_dims(&self, w: usize, h: usize) -> (usize, usize) {
        let m = self.regions_per_side * self.grid_size;
        (w.div_ceil(m) * m, h.div_ceil(m) * m)
    }
}

/// Grid layout of one padded image.
struct Layout {
    region_w: usize,
    region_h: usize,
    grids_x: usize,
    grids_y: usize,
}

impl Layout {
    fn new(cfg: &CcLossConfig, w: usize, h: usize) -> Self {
        let (pw, ph) = cfg.padded_dims(w, h);
        let region_w = pw / cfg.regions_per_side;
        let region_h = ph / cfg.regions_per_side;
        Self {
            region_w,
            region_h,
            grids_x: (region_w - cfg.grid_size) / cfg.grid_stride + 1,
            grids_y: (region_h - cfg.grid_size) / cfg.grid_stride + 1,
        }
    }

    /// Top-left corners of the grids of region `(rx, ry)`, row-major.
    fn grid_origins(&self, cfg: &CcLossConfig, rx: usize, ry: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(self.grids_x * self.grids_y);
        for gy in 0..self.grids_y {
            for gx in 0..self.grids_x {
                v.push((
                    rx * self.region_w + gx * cfg.grid_stride,
                    ry * self.region_h + gy * cfg.grid_stride,
                ));
            }
        }
        v
    }
}

fn grid_mean<T: Scalar>(img: &Raster<T>, x0: usize, y0: usize, n: usize) -> T {
    let mut acc = T::zero();
    for y in y0..y0 + n {
        for x in x0..x0 + n {
            // zero padding beyond the image
            if x < img.width() && y < img.height() {
                acc += img.get(x, y);
            }
        }
    }
    acc / T::from_usize_lossy(n * n)
}

/// Grid means per region; regions are row-major, grids row-major within.
pub fn grid_means<T: Scalar>(img: &Raster<T>, cfg: &CcLossConfig) -> Vec<Vec<T>> {
    let layout = Layout::new(cfg, img.width(), img.height());
    let mut out = Vec::with_capacity(cfg.region_count());
    for ry in 0..cfg.regions_per_side {
        for rx in 0..cfg.regions_per_side {
            out.push(
                layout
                    .grid_origins(cfg, rx, ry)
                    .into_iter()
                    .map(|(x, y)| grid_mean(img, x, y, cfg.grid_size))
                    .collect(),
            );
        }
    }
    out
}

fn all_equal<T: Scalar>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

struct RegionStats<T> {
    rho: T,
    /// d(rho)/d(pred grid mean k)
    drho: Vec<T>,
}

fn region_correlation<T: Scalar>(s: &[T], e: &[T], eps: T, want_grad: bool) -> Option<RegionStats<T>> {
    if s.len() < 2 || all_equal(s) || all_equal(e) {
        return None;
    }
    let n = T::from_usize_lossy(s.len());
    let s_mean = s.iter().copied().sum::<T>() / n;
    let e_mean = e.iter().copied().sum::<T>() / n;
    let ds: Vec<T> = s.iter().map(|&v| v - s_mean).collect();
    let de: Vec<T> = e.iter().map(|&v| v - e_mean).collect();
    let c: T = ds.iter().zip(&de).map(|(&a, &b)| a * b).sum();
    let a: T = ds.iter().map(|&v| v * v).sum();
    let b: T = de.iter().map(|&v| v * v).sum();
    let d = (a * b + eps).sqrt();
    let rho = c / d;
    let drho = if want_grad {
        let d3 = d * d * d;
        ds.iter()
            .zip(&de)
            .map(|(&dsk, &dek)| dek / d - c * b * dsk / d3)
            .collect()
    } else {
        Vec::new()
    };
    Some(RegionStats { rho, drho })
}

/// Per-region Pearson correlation; `None` for regions with a constant side.
pub fn region_correlations<T: Scalar>(
    pred: &Raster<T>,
    target: &Raster<T>,
    cfg: &CcLossConfig,
) -> Result<Vec<Option<T>>> {
    pred.ensure_same_dims(target)?;
    cfg.validate()?;
    let eps = T::lit(cfg.epsilon);
    Ok(grid_means(pred, cfg)
        .iter()
        .zip(&grid_means(target, cfg))
        .map(|(s, e)| region_correlation(s, e, eps, false).map(|r| r.rho))
        .collect())
}

pub fn cc_loss<T: Scalar>(pred: &Raster<T>, target: &Raster<T>, cfg: &CcLossConfig) -> Result<T> {
    Ok(-region_correlations(pred, target, cfg)?
        .into_iter()
        .flatten()
        .sum::<T>())
}

/// Loss and its gradient with respect to `pred`.
pub fn cc_loss_with_grad<T: Scalar>(
    pred: &Raster<T>,
    target: &Raster<T>,
    cfg: &CcLossConfig,
) -> Result<(T, Raster<T>)> {
    pred.ensure_same_dims(target)?;
    cfg.validate()?;
    let (w, h) = pred.dims();
    let layout = Layout::new(cfg, w, h);
    let eps = T::lit(cfg.epsilon);
    let inv_area = T::one() / T::from_usize_lossy(cfg.grid_size * cfg.grid_size);
    let mut grad = Raster::zeros(w, h);
    let mut loss = T::zero();
    for ry in 0..cfg.regions_per_side {
        for rx in 0..cfg.regions_per_side {
            let origins = layout.grid_origins(cfg, rx, ry);
            let s: Vec<T> = origins.iter().map(|&(x, y)| grid_mean(pred, x, y, cfg.grid_size)).collect();
            let e: Vec<T> = origins.iter().map(|&(x, y)| grid_mean(target, x, y, cfg.grid_size)).collect();
            let Some(stats) = region_correlation(&s, &e, eps, true) else {
                continue;
            };
            loss -= stats.rho;
            for (&(x0, y0), &dr) in origins.iter().zip(&stats.drho) {
                let g = -dr * inv_area;
                for y in y0..(y0 + cfg.grid_size).min(h) {
                    for x in x0..(x0 + cfg.grid_size).min(w) {
                        let cur = grad.get(x, y);
                        grad.set(x, y, cur + g);
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_grid_means() {
        let img = Raster::filled(16, 16, 0.37f64);
        for region in grid_means(&img, &CcLossConfig::new(4, 2)) {
            assert_eq!(region.len(), 4);
            assert!(region.iter().all(|&m| (m - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn eight_by_eight_direct_summation() {
        let img = Raster::from_fn(8, 8, |x, y| (x * 8 + y) as f64);
        let means = grid_means(&img, &CcLossConfig::new(4, 1));
        assert_eq!(means.len(), 1);
        let mut expected = Vec::new();
        for gy in 0..2 {
            for gx in 0..2 {
                let mut s = 0.0;
                for y in 0..4 {
                    for x in 0..4 {
                        s += ((gx * 4 + x) * 8 + gy * 4 + y) as f64;
                    }
                }
                expected.push(s / 16.0);
            }
        }
        assert_eq!(means[0], expected);
    }

    #[test]
    fn checkerboard_means_are_half() {
        let img = Raster::from_fn(16, 16, |x, y| ((x + y) % 2) as f64);
        for region in grid_means(&img, &CcLossConfig::new(4, 2)) {
            assert!(region.iter().all(|&m| m == 0.5));
        }
    }

    #[test]
    fn padding_extends_to_multiple() {
        let img = Raster::filled(10, 10, 1.0f64);
        let means = grid_means(&img, &CcLossConfig::new(4, 1));
        // padded to 12x12: 3x3 grids, the last row/column partly zero
        assert_eq!(means[0].len(), 9);
        assert_eq!(means[0][0], 1.0);
        assert_eq!(means[0][2], 0.5);
        assert_eq!(means[0][8], 0.25);
    }

    #[test]
    fn anti_correlation_is_plus_one() {
        let e = Raster::from_fn(16, 16, |x, y| if (x / 4 + y / 4) % 3 == 0 { 1.0 } else { 0.0 });
        let s = e.map(|v: f64| 1.0 - v);
        let loss = cc_loss(&s, &e, &CcLossConfig::new(4, 1)).unwrap();
        assert!((loss - 1.0).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn zero_variance_regions_contribute_nothing() {
        let e = Raster::<f64>::zeros(16, 16);
        let s = Raster::from_fn(16, 16, |x, y| (x * y) as f64);
        assert_eq!(cc_loss(&s, &e, &CcLossConfig::new(4, 2)).unwrap(), 0.0);
        let (_, g) = cc_loss_with_grad(&s, &e, &CcLossConfig::new(4, 2)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = Raster::<f64>::zeros(8, 8);
        let b = Raster::<f64>::zeros(8, 4);
        assert!(cc_loss(&a, &b, &CcLossConfig::default()).is_err());
    }
}
