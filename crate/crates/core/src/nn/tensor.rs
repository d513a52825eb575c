use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Scalar;

/// Dense NCHW tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(&shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    /// Stack single-channel rasters of equal size into `[n, 1, h, w]`.
    pub fn from_rasters(rasters: &[&Raster<T>]) -> Result<Self> {
        let first = rasters
            .first()
            .ok_or_else(|| Error::InvalidParameter("no rasters to stack".into()))?;
        let (w, h) = first.dims();
        let mut data = Vec::with_capacity(rasters.len() * w * h);
        for r in rasters {
            first.ensure_same_dims(*r)?;
            data.extend_from_slice(r.data());
        }
        Self::from_vec([rasters.len(), 1, h, w], data)
    }

    /// Channel `c` of batch item `n` as a raster.
    pub fn raster(&self, n: usize, c: usize) -> Raster<T> {
        let [_, _, h, w] = self.shape;
        let off = (n * self.shape[1] + c) * h * w;
        Raster::from_vec(w, h, self.data[off..off + h * w].to_vec()).expect("plane size")
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(&shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial window `[y0, y0 + h) x [x0, x0 + w)` of every item and channel.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let [n, c, hh, ww] = self.shape;
        assert!(x0 + w <= ww && y0 + h <= hh, "tensor crop out of bounds");
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            let base = plane * hh * ww;
            for y in y0..y0 + h {
                data.extend_from_slice(&self.data[base + y * ww + x0..base + y * ww + x0 + w]);
            }
        }
        Self {
            shape: [n, c, h, w],
            data,
        }
    }

    /// Items `[start, start + len)` along the batch axis.
    pub fn batch_slice(&self, start: usize, len: usize) -> Self {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Self {
            shape: [len, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn cat_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty batch".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(Error::shape(&first.shape, &t.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Self::from_vec([n, c, h, w], data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}
