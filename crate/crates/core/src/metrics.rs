//! Image fidelity and overlap metrics. Data range is 1.0 throughout.

use crate::error::{Error, Result};
use crate::raster::{BinaryImage, Raster};
use crate::scalar::Scalar;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse<T: Scalar>(gt: &Raster<T>, pred: &Raster<T>) -> Result<T> {
    gt.ensure_same_dims(pred)?;
    let n = T::from_usize_lossy(gt.len().max(1));
    let sq: T = gt
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sq / n)
}

/// RMSE normalized by the ground-truth dynamic range.
pub fn nrmse<T: Scalar>(gt: &Raster<T>, pred: &Raster<T>) -> Result<T> {
    let err = mse(gt, pred)?.sqrt();
    let (lo, hi) = gt.min_max();
    if hi <= lo {
        return Err(Error::DegenerateRange);
    }
    Ok(err / (hi - lo))
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`] for identical inputs.
pub fn psnr<T: Scalar>(gt: &Raster<T>, pred: &Raster<T>) -> Result<T> {
    let m = mse(gt, pred)?;
    let cap = T::lit(PSNR_CAP_DB);
    if m <= T::zero() {
        return Ok(cap);
    }
    Ok((T::lit(10.0) * (T::one() / m).log10()).min(cap))
}

/// Mean SSIM over every fully contained 7x7 window (uniform weights,
/// sample covariance, K1 = 0.01, K2 = 0.03).
pub fn ssim<T: Scalar>(gt: &Raster<T>, pred: &Raster<T>) -> Result<T> {
    gt.ensure_same_dims(pred)?;
    let (w, h) = gt.dims();
    let win = SSIM_WINDOW;
    if win > w || win > h {
        return Err(Error::WindowTooLarge {
            window: win,
            width: w,
            height: h,
        });
    }
    let c1 = T::lit((SSIM_K1 * 1.0).powi(2));
    let c2 = T::lit((SSIM_K2 * 1.0).powi(2));
    let np = T::from_usize_lossy(win * win);
    let cov_norm = np / (np - T::one());
    let two = T::lit(2.0);

    // summed-area tables for x, y, x^2, y^2, xy
    let integral = |f: &dyn Fn(usize, usize) -> T| -> Vec<T> {
        let mut t = vec![T::zero(); (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = T::zero();
            for x in 0..w {
                row += f(x, y);
                t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
            }
        }
        t
    };
    let sx = integral(&|x, y| gt.get(x, y));
    let sy = integral(&|x, y| pred.get(x, y));
    let sxx = integral(&|x, y| gt.get(x, y) * gt.get(x, y));
    let syy = integral(&|x, y| pred.get(x, y) * pred.get(x, y));
    let sxy = integral(&|x, y| gt.get(x, y) * pred.get(x, y));
    let box_sum = |t: &[T], x0: usize, y0: usize| -> T {
        let (x1, y1) = (x0 + win, y0 + win);
        t[y1 * (w + 1) + x1] - t[y0 * (w + 1) + x1] - t[y1 * (w + 1) + x0] + t[y0 * (w + 1) + x0]
    };

    let mut total = T::zero();
    let mut count = 0usize;
    for y0 in 0..=(h - win) {
        for x0 in 0..=(w - win) {
            let ux = box_sum(&sx, x0, y0) / np;
            let uy = box_sum(&sy, x0, y0) / np;
            let vx = cov_norm * (box_sum(&sxx, x0, y0) / np - ux * ux);
            let vy = cov_norm * (box_sum(&syy, x0, y0) / np - uy * uy);
            let vxy = cov_norm * (box_sum(&sxy, x0, y0) / np - ux * uy);
            let num = (two * ux * uy + c1) * (two * vxy + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / T::from_usize_lossy(count))
}

/// `2|a ∩ b| / (|a| + |b|)`; two empty masks agree perfectly.
pub fn dice(a: &BinaryImage, b: &BinaryImage) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let inter = a.data().iter().zip(b.data()).filter(|(&x, &y)| x && y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Dice on {0, 1}-valued scalar rasters; other values are rejected.
pub fn dice_values<T: Scalar>(a: &Raster<T>, b: &Raster<T>) -> Result<f64> {
    dice(&BinaryImage::from_values(a)?, &BinaryImage::from_values(b)?)
}

/// Otsu threshold over a 256-bin histogram of the selected pixels in [0, 1].
pub fn otsu_threshold<T: Scalar>(img: &Raster<T>, region: Option<&BinaryImage>) -> T {
    let mut hist = [0usize; 256];
    let mut n = 0usize;
    for (i, &v) in img.data().iter().enumerate() {
        if region.is_none_or(|r| r.data()[i]) {
            let bin = (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as usize;
            hist[bin] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return T::lit(0.5);
    }
    let total_mean: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_bin) = (-1.0f64, 0usize);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = n as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (total_mean - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    // pixels strictly above the bin centre are foreground
    T::lit((best_bin as f64 + 0.5) / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities() {
        let gt = Raster::from_fn(16, 16, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        assert_eq!(nrmse(&gt, &gt).unwrap(), 0.0);
        assert_eq!(psnr(&gt, &gt).unwrap(), 100.0);
        assert_eq!(ssim(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn checkerboard_inversion_has_unit_nrmse() {
        let gt = Raster::from_fn(8, 8, |x, y| ((x + y) % 2) as f64);
        let pred = gt.map(|v| 1.0 - v);
        assert_eq!(nrmse(&gt, &pred).unwrap(), 1.0);
    }

    #[test]
    fn psnr_of_mse_point_zero_one_is_twenty() {
        let gt = Raster::filled(4, 4, 0.5f64);
        let pred = gt.map(|v| v + 0.1);
        assert!((psnr(&gt, &pred).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn constant_gt_is_degenerate() {
        let gt = Raster::filled(4, 4, 0.5f64);
        assert!(matches!(nrmse(&gt, &gt), Err(Error::DegenerateRange)));
    }

    #[test]
    fn offset_lowers_ssim() {
        let gt = Raster::from_fn(16, 16, |x, y| ((x * 5 + y) % 7) as f64 / 14.0);
        let pred = gt.map(|v| v + 0.5);
        assert!(ssim(&gt, &pred).unwrap() < 1.0);
        assert!(ssim(&Raster::<f64>::zeros(6, 6), &Raster::zeros(6, 6)).is_err());
    }

    #[test]
    fn dice_cases() {
        let a = BinaryImage::from_fn(20, 10, |x, _| x < 10);
        let b = BinaryImage::from_fn(20, 10, |x, _| x >= 10);
        let half = BinaryImage::from_fn(20, 10, |x, _| (5..15).contains(&x));
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&a, &half).unwrap(), 0.5);
        let empty = BinaryImage::filled(20, 10, false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        let bad = Raster::filled(2, 2, 0.3f32);
        assert!(dice_values(&bad, &bad).is_err());
    }

    #[test]
    fn otsu_separates_two_levels() {
        let img = Raster::from_fn(20, 20, |x, _| if x < 8 { 0.2f32 } else { 0.8 });
        let t = otsu_threshold(&img, None);
        assert!(t > 0.2 && t < 0.8);
        assert_eq!(img.threshold(t).count(), 12 * 20);
    }
}
