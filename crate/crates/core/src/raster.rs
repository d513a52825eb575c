//! Single-channel 2D rasters stored row-major.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Binary raster; `true` is foreground.
pub type BinaryImage = Raster<bool>;

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(&[width * height], &[data.len()]));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Signed lookup; `None` outside the raster.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize) -> Option<T> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            None
        } else {
            Some(self.data[y as usize * self.width + x as usize])
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map<U: Copy, V: Copy>(
        &self,
        other: &Raster<U>,
        f: impl Fn(T, U) -> V,
    ) -> Result<Raster<V>> {
        self.ensure_same_dims(other)?;
        Ok(Raster {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn ensure_same_dims<U>(&self, other: &Raster<U>) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }

    /// Copy of the window `[x0, x0 + w) x [y0, y0 + h)`; must lie inside the raster.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster<T> {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        Raster::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    /// Extend to `new_w x new_h` (top-left anchored) with `fill`.
    pub fn pad_to(&self, new_w: usize, new_h: usize, fill: T) -> Raster<T> {
        assert!(new_w >= self.width && new_h >= self.height);
        Raster::from_fn(new_w, new_h, |x, y| {
            if x < self.width && y < self.height {
                self.get(x, y)
            } else {
                fill
            }
        })
    }

    /// Extend to `new_w x new_h` by mirroring about the last row/column.
    pub fn pad_reflect_to(&self, new_w: usize, new_h: usize) -> Raster<T> {
        assert!(new_w >= self.width && new_h >= self.height);
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n {
                r
            } else {
                period - r
            }
        };
        Raster::from_fn(new_w, new_h, |x, y| {
            self.get(reflect(x, self.width), reflect(y, self.height))
        })
    }

    pub fn flip_horizontal(&self) -> Raster<T> {
        Raster::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn flip_vertical(&self) -> Raster<T> {
        Raster::from_fn(self.width, self.height, |x, y| {
            self.get(x, self.height - 1 - y)
        })
    }
}

impl BinaryImage {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    /// Interpret a scalar raster as binary, rejecting values outside {0, 1}.
    pub fn from_values<T: Scalar>(r: &Raster<T>) -> Result<Self> {
        let mut out = Vec::with_capacity(r.len());
        for &v in r.data() {
            if v == T::zero() {
                out.push(false);
            } else if v == T::one() {
                out.push(true);
            } else {
                return Err(Error::NonBinary(v.as_f64()));
            }
        }
        Raster::from_vec(r.width(), r.height(), out)
    }

    pub fn to_scalar<T: Scalar>(&self) -> Raster<T> {
        self.map(|b| if b { T::one() } else { T::zero() })
    }

    pub fn and(&self, other: &BinaryImage) -> Result<BinaryImage> {
        self.zip_map(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryImage) -> Result<BinaryImage> {
        self.zip_map(other, |a, b| a || b)
    }

    pub fn xor(&self, other: &BinaryImage) -> Result<BinaryImage> {
        self.zip_map(other, |a, b| a ^ b)
    }

    pub fn not(&self) -> BinaryImage {
        self.map(|b| !b)
    }

    /// Mean (x, y) of foreground pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the foreground.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }
}

impl<T: Scalar> Raster<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, T::zero())
    }

    /// Error on the first NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                value: self.data[index].as_f64(),
            }),
            None => Ok(()),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.data.len().max(1))
    }

    /// `v > threshold` elementwise.
    pub fn threshold(&self, threshold: T) -> BinaryImage {
        self.map(|v| v > threshold)
    }

    pub fn cast<U: Scalar>(&self) -> Raster<U> {
        self.map(|v| U::lit(v.as_f64()))
    }
}
