//! Glue between stages: latent statistics and LDM training conditions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ldm::LdmExample;
use crate::mask_ops::{interior_mask, reference_map, InteriorMask, ReferenceMode};
use crate::nn::Tensor;
use crate::raster::{BinaryImage, Raster};
use crate::refiner::Refiner;
use crate::scalar::Scalar;
use crate::sketch::{extract_edges, synthesize_training_pair, DeformationParams};
use crate::vae::Vae;

/// An annotated slice: image, tumor mask, voxel spacing.
#[derive(Clone, Debug)]
pub struct AnnotatedSlice<T> {
    pub image: Raster<T>,
    pub mask: BinaryImage,
    pub spacing: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionOptions {
    /// Condition sets drawn per slice.
    pub variants_per_slice: usize,
    /// Share of conditions built from the clean edge map instead of a
    /// synthesized sketch.
    pub accurate_edge_fraction: f64,
    pub deformation: DeformationParams,
    pub reference_mode: ReferenceMode,
    pub seed: u64,
}

impl Default for ConditionOptions {
    fn default() -> Self {
        Self {
            variants_per_slice: 2,
            accurate_edge_fraction: 0.5,
            deformation: DeformationParams::default(),
            reference_mode: ReferenceMode::Complement,
            seed: 0,
        }
    }
}

/// Refined sketch, interior and reference for one raw sketch. Open refined
/// contours fall back to `fallback`, when given.
pub fn sketch_conditions<T: Scalar>(
    refiner: &Refiner<T>,
    image: &Raster<T>,
    raw: &Raster<T>,
    fallback: Option<&BinaryImage>,
    mode: ReferenceMode,
) -> Result<(Raster<T>, InteriorMask, Raster<T>)> {
    let (soft, bin) = refiner.refine(raw)?;
    let interior = match (interior_mask(&bin), fallback) {
        (Ok(m), _) => m,
        (Err(Error::OpenContour), Some(f)) => InteriorMask(f.clone()),
        (Err(e), _) => return Err(e),
    };
    let reference = reference_map(image, &interior, mode)?;
    Ok((soft, interior, reference))
}

/// `1 / std` of the VAE means over `images`.
pub fn latent_scale<T: Scalar>(vae: &Vae<T>, images: &[Raster<T>]) -> Result<f64> {
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
    for img in images {
        let mu = vae.encode(&Tensor::from_rasters(&[img])?, None)?.mu;
        for &v in mu.data() {
            let v = v.as_f64();
            s += v;
            s2 += v * v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidParameter("no images for latent statistics".into()));
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    if var < 1e-12 {
        return Err(Error::InvalidParameter("VAE latents have no variance".into()));
    }
    Ok(1.0 / var.sqrt())
}

/// Encode every slice and pair it with sketch conditions drawn the same way
/// as at inference time (synthesized or clean sketch, then the refiner).
pub fn prepare_ldm_examples<T: Scalar>(
    slices: &[AnnotatedSlice<T>],
    vae: &Vae<T>,
    refiner: &Refiner<T>,
    scale: f64,
    opts: &ConditionOptions,
) -> Result<Vec<LdmExample<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0004);
    let scale = T::lit(scale);
    let mut out = Vec::with_capacity(slices.len() * opts.variants_per_slice);
    for s in slices {
        let latent = vae.encode(&Tensor::from_rasters(&[&s.image])?, None)?.mu.map(|v| v * scale);
        let focus = s.mask.centroid();
        for _ in 0..opts.variants_per_slice {
            let clean = rng.random_bool(opts.accurate_edge_fraction.clamp(0.0, 1.0));
            let raw = match (clean, synthesize_training_pair(&s.mask, &opts.deformation, &mut rng)) {
                (false, Ok((sketch, _))) => sketch,
                (_, Ok(_) | Err(Error::DegenerateSketch { .. })) => extract_edges(&s.mask)?.into_inner(),
                (_, Err(e)) => return Err(e),
            };
            let (soft, _, reference) =
                sketch_conditions(refiner, &s.image, &raw.to_scalar(), Some(&s.mask), opts.reference_mode)?;
            out.push(LdmExample {
                latent: latent.clone(),
                sketch: soft,
                reference,
                spacing: s.spacing,
                focus,
            });
        }
    }
    Ok(out)
}
