//! Pseudo hand-drawn sketch synthesis from segmentation masks.
//!
//! A clean one-pixel edge map is extracted from the mask, randomly eroded or
//! dilated, then elastically warped by a smoothed Gaussian displacement field.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{bilinear_sample, gaussian_blur};
use crate::morphology::{dilate, erode, StructuringElement};
use crate::raster::{BinaryImage, Raster};

/// Minimum foreground pixels for a synthesized sketch to be usable.
pub const MIN_SKETCH_PIXELS: usize = 8;
/// Extra attempts after the first before giving up.
pub const SKETCH_RETRIES: usize = 5;

/// Binary edge raster (`true` = edge).
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap(pub BinaryImage);

impl EdgeMap {
    pub fn pixels(&self) -> &BinaryImage {
        &self.0
    }

    pub fn into_inner(self) -> BinaryImage {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationParams {
    /// Standard deviation of the raw displacement components, pixels.
    pub sigma0: f64,
    /// Standard deviation of the Gaussian smoothing the displacement, pixels.
    pub sigma_smooth: f64,
    pub morph_kernel: usize,
    pub erosion_probability: f64,
}

impl Default for DeformationParams {
    fn default() -> Self {
        Self {
            sigma0: 4.0,
            sigma_smooth: 6.0,
            morph_kernel: 3,
            erosion_probability: 0.5,
        }
    }
}

impl DeformationParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma0 >= 0.0
            && self.sigma0.is_finite()
            && self.sigma_smooth > 0.0
            && self.morph_kernel == 3
            && (0.0..=1.0).contains(&self.erosion_probability);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad deformation params {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    Erode,
    Dilate,
}

/// One-pixel boundary of a binary mask: `mask XOR erode(mask, cross)`.
///
/// For binary input this is the Canny response without the non-maximum
/// suppression and hysteresis parameters.
pub fn extract_edges(mask: &BinaryImage) -> Result<EdgeMap> {
    if !mask.any() {
        return Err(Error::EmptyMask);
    }
    let inner = erode(mask, StructuringElement::Cross);
    Ok(EdgeMap(mask.xor(&inner)?))
}

pub fn apply_perturbation(edges: &EdgeMap, params: &DeformationParams, op: Perturbation) -> EdgeMap {
    let se = StructuringElement::Square(params.morph_kernel);
    EdgeMap(match op {
        Perturbation::Erode => erode(&edges.0, se),
        Perturbation::Dilate => dilate(&edges.0, se),
    })
}

/// Random single erosion (probability `erosion_probability`) or dilation.
pub fn perturb_edges<R: Rng + ?Sized>(
    edges: &EdgeMap,
    params: &DeformationParams,
    rng: &mut R,
) -> (EdgeMap, Perturbation) {
    let op = if rng.random_bool(params.erosion_probability) {
        Perturbation::Erode
    } else {
        Perturbation::Dilate
    };
    (apply_perturbation(edges, params, op), op)
}

/// Per-pixel displacement `(dx, dy)`, each component i.i.d. N(0, sigma0) then
/// Gaussian-smoothed.
pub fn displacement_field<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    params: &DeformationParams,
    rng: &mut R,
) -> (Raster<f64>, Raster<f64>) {
    let normal = Normal::new(0.0, params.sigma0).expect("sigma0 validated");
    let dx = Raster::from_fn(width, height, |_, _| normal.sample(rng));
    let dy = Raster::from_fn(width, height, |_, _| normal.sample(rng));
    (
        gaussian_blur(&dx, params.sigma_smooth),
        gaussian_blur(&dy, params.sigma_smooth),
    )
}

/// Warp a binary map through a displacement field with bilinear resampling,
/// zero padding outside the frame and re-binarization at 0.5.
pub fn warp_binary(img: &BinaryImage, dx: &Raster<f64>, dy: &Raster<f64>) -> BinaryImage {
    let src: Raster<f64> = img.to_scalar();
    BinaryImage::from_fn(img.width(), img.height(), |x, y| {
        let sx = x as f64 + dx.get(x, y);
        let sy = y as f64 + dy.get(x, y);
        bilinear_sample(&src, sx, sy) >= 0.5
    })
}

pub fn elastic_deform<R: Rng + ?Sized>(
    edges: &EdgeMap,
    params: &DeformationParams,
    rng: &mut R,
) -> BinaryImage {
    let (w, h) = edges.0.dims();
    let (dx, dy) = displacement_field(w, h, params, rng);
    warp_binary(&edges.0, &dx, &dy)
}

/// `(S*, E)`: a deformed sketch and the clean edge map of `mask`.
pub fn synthesize_training_pair<R: Rng + ?Sized>(
    mask: &BinaryImage,
    params: &DeformationParams,
    rng: &mut R,
) -> Result<(BinaryImage, EdgeMap)> {
    params.validate()?;
    let edges = extract_edges(mask)?;
    for _ in 0..=SKETCH_RETRIES {
        let (perturbed, _) = perturb_edges(&edges, params, rng);
        let sketch = elastic_deform(&perturbed, params, rng);
        if sketch.count() >= MIN_SKETCH_PIXELS {
            return Ok((sketch, edges));
        }
    }
    Err(Error::DegenerateSketch {
        attempts: SKETCH_RETRIES + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(n: usize, lo: usize, side: usize) -> BinaryImage {
        BinaryImage::from_fn(n, n, |x, y| x >= lo && x < lo + side && y >= lo && y < lo + side)
    }

    #[test]
    fn square_outline_has_76_pixels() {
        let e = extract_edges(&square(64, 20, 20)).unwrap();
        // brute force: pixels of the square with a 4-neighbour outside it
        let m = square(64, 20, 20);
        let mut count = 0;
        for y in 0..64isize {
            for x in 0..64isize {
                if m.get_signed(x, y) == Some(true)
                    && [(1, 0), (-1, 0), (0, 1), (0, -1)]
                        .iter()
                        .any(|(dx, dy)| m.get_signed(x + dx, y + dy) != Some(true))
                {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 76);
        assert_eq!(e.0.count(), 76);
    }

    #[test]
    fn single_pixel_is_its_own_edge() {
        let m = BinaryImage::from_fn(8, 8, |x, y| x == 3 && y == 5);
        assert_eq!(extract_edges(&m).unwrap().0, m);
        assert!(matches!(
            extract_edges(&BinaryImage::filled(8, 8, false)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn zero_sigma_is_identity() {
        let e = extract_edges(&square(32, 8, 12)).unwrap();
        let params = DeformationParams { sigma0: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(elastic_deform(&e, &params, &mut rng), e.0);
    }

    #[test]
    fn forced_dilation_pair_is_thick_outline() {
        let m = square(48, 10, 20);
        let params = DeformationParams {
            sigma0: 0.0,
            erosion_probability: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, e) = synthesize_training_pair(&m, &params, &mut rng).unwrap();
        assert_eq!(e, extract_edges(&m).unwrap());
        assert_eq!(s, dilate(&e.0, StructuringElement::Square(3)));
    }

    #[test]
    fn tiny_mask_with_forced_erosion_exhausts_retries() {
        let m = BinaryImage::from_fn(16, 16, |x, y| y == 8 && (x == 8 || x == 9));
        let params = DeformationParams { erosion_probability: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            synthesize_training_pair(&m, &params, &mut rng),
            Err(Error::DegenerateSketch { attempts: 6 })
        ));
    }

    #[test]
    fn fixed_seed_reproduces_pair() {
        let m = square(40, 10, 15);
        let p = DeformationParams::default();
        let a = synthesize_training_pair(&m, &p, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = synthesize_training_pair(&m, &p, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_frame_samples_are_background() {
        let e = EdgeMap(BinaryImage::filled(6, 6, true));
        let shift = Raster::filled(6, 6, 10.0);
        let zero = Raster::filled(6, 6, 0.0);
        assert_eq!(warp_binary(&e.0, &shift, &zero).count(), 0);
    }
}
