//! Linear filtering and resampling on scalar rasters.

use crate::raster::Raster;
use crate::scalar::Scalar;

/// Normalized 1D Gaussian taps truncated at four standard deviations.
pub fn gaussian_kernel<T: Scalar>(sigma: f64) -> Vec<T> {
    if sigma <= 0.0 {
        return vec![T::one()];
    }
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| T::lit(t / total)).collect()
}

#[inline]
fn mirror(i: isize, n: usize) -> usize {
    // symmetric reflection (d c b a | a b c d | d c b a)
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - 1 - r;
    }
    r as usize
}

/// Separable Gaussian blur with symmetric boundary reflection.
pub fn gaussian_blur<T: Scalar>(img: &Raster<T>, sigma: f64) -> Raster<T> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel::<T>(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = img.dims();
    let horiz = Raster::from_fn(w, h, |x, y| {
        let mut acc = T::zero();
        for (i, &kv) in k.iter().enumerate() {
            let xx = mirror(x as isize + i as isize - r, w);
            acc += kv * img.get(xx, y);
        }
        acc
    });
    Raster::from_fn(w, h, |x, y| {
        let mut acc = T::zero();
        for (i, &kv) in k.iter().enumerate() {
            let yy = mirror(y as isize + i as isize - r, h);
            acc += kv * horiz.get(x, yy);
        }
        acc
    })
}

/// Bilinear sample at continuous pixel coordinates; outside pixels read as zero.
pub fn bilinear_sample<T: Scalar>(img: &Raster<T>, x: T, y: T) -> T {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let (Some(x0), Some(y0)) = (x0f.to_isize(), y0f.to_isize()) else {
        return T::zero();
    };
    let at = |xi: isize, yi: isize| img.get_signed(xi, yi).unwrap_or(T::zero());
    let one = T::one();
    at(x0, y0) * (one - fx) * (one - fy)
        + at(x0 + 1, y0) * fx * (one - fy)
        + at(x0, y0 + 1) * (one - fx) * fy
        + at(x0 + 1, y0 + 1) * fx * fy
}

/// 2x2 box downsampling; odd trailing rows/columns are dropped.
pub fn downsample2<T: Scalar>(img: &Raster<T>) -> Raster<T> {
    let (w, h) = (img.width() / 2, img.height() / 2);
    let quarter = T::lit(0.25);
    Raster::from_fn(w, h, |x, y| {
        (img.get(2 * x, 2 * y)
            + img.get(2 * x + 1, 2 * y)
            + img.get(2 * x, 2 * y + 1)
            + img.get(2 * x + 1, 2 * y + 1))
            * quarter
    })
}
