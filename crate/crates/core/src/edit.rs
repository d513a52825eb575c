//! Inference pipeline: refine the sketch, derive interior and reference,
//! sample the conditioned latent and decode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ldm::{ConditionInputs, KnownRegion, Ldm, SamplerConfig};
use crate::mask_ops::{interior_mask, reference_map, InteriorMask, ReferenceMode};
use crate::morphology::{dilate, StructuringElement};
use crate::nn::Tensor;
use crate::raster::{BinaryImage, Raster};
use crate::refiner::Refiner;
use crate::scalar::Scalar;
use crate::vae::Vae;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditOptions {
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub reference_mode: ReferenceMode,
    /// Keep latents (and pixels) outside the dilated interior from the source.
    pub preserve_background: bool,
    /// Dilation of the interior, in pixels, before it is moved to the latent grid.
    pub background_margin: usize,
    /// Minimum side of the latent window sampled around the edit.
    pub window: Option<usize>,
    /// Run the sketch refiner; when off the raw sketch conditions directly.
    pub refine: bool,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            sampler: SamplerConfig::default(),
            reference_mode: ReferenceMode::Complement,
            preserve_background: true,
            background_margin: 6,
            window: Some(16),
            refine: true,
        }
    }
}

pub struct EditModels<'a, T: Scalar> {
    pub refiner: &'a Refiner<T>,
    pub vae: &'a Vae<T>,
    pub ldm: &'a Ldm<T>,
}

#[derive(Clone, Debug)]
pub struct EditResult<T> {
    pub edited: Raster<T>,
    /// Decoder output before background compositing.
    pub decoded: Raster<T>,
    pub soft_sketch: Raster<T>,
    pub sketch: BinaryImage,
    pub interior: InteriorMask,
    pub reference: Raster<T>,
    /// `|edited - source|`.
    pub difference: Raster<T>,
    /// Pixels the edit was allowed to change.
    pub edit_region: BinaryImage,
    pub seed: u64,
}

/// Max-pool a binary mask onto an `f`-times coarser grid.
fn to_latent_grid(mask: &BinaryImage, f: usize) -> BinaryImage {
    BinaryImage::from_fn(mask.width() / f, mask.height() / f, |x, y| {
        (0..f).any(|dy| (0..f).any(|dx| mask.get(x * f + dx, y * f + dy)))
    })
}

/// Latent window `(x0, y0, w, h)` containing the mask, at least `min_side`
/// wide where the latent allows, sides multiples of `m`.
fn latent_window(mask: &BinaryImage, min_side: Option<usize>, m: usize) -> (usize, usize, usize, usize) {
    let (lw, lh) = mask.dims();
    let (Some(min_side), Some((x0, y0, x1, y1))) = (min_side, mask.bounding_box()) else {
        return (0, 0, lw, lh);
    };
    let fit = |lo: usize, hi: usize, full: usize| {
        let side = (hi - lo + 1).max(min_side).div_ceil(m) * m;
        if side >= full {
            return (0, full);
        }
        let centre = (lo + hi + 1) / 2;
        let start = centre.saturating_sub(side / 2).min(full - side);
        (start, side)
    };
    let (wx, ww) = fit(x0, x1, lw);
    let (wy, wh) = fit(y0, y1, lh);
    (wx, wy, ww, wh)
}

fn paste<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, x0: usize, y0: usize) {
    let [n, c, h, w] = dst.shape();
    let [_, _, sh, sw] = src.shape();
    debug_assert!(x0 + sw <= w && y0 + sh <= h);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..sh {
                for x in 0..sw {
                    dst.data_mut()[((b * c + ch) * h + y0 + y) * w + x0 + x] = src.data()[((b * c + ch) * sh + y) * sw + x];
                }
            }
        }
    }
}

fn binary_tensor<T: Scalar>(mask: &BinaryImage) -> Result<Tensor<T>> {
    Tensor::from_rasters(&[&mask.to_scalar::<T>()])
}

/// Edit `image` so its tumor follows `raw_sketch`.
pub fn edit_image<T: Scalar>(
    image: &Raster<T>,
    raw_sketch: &Raster<T>,
    spacing: [f64; 3],
    models: &EditModels<'_, T>,
    opts: &EditOptions,
) -> Result<EditResult<T>> {
    image.ensure_same_dims(raw_sketch)?;
    image.ensure_finite()?;
    if !raw_sketch.data().iter().any(|&v| v > T::lit(0.5)) {
        return Err(Error::OpenContour);
    }
    let (soft, sketch) = if opts.refine {
        models.refiner.refine(raw_sketch)?
    } else {
        (raw_sketch.clone(), raw_sketch.threshold(T::lit(0.5)))
    };
    // a refined stroke that came out broken falls back to the drawn one
    let interior = match interior_mask(&sketch) {
        Err(Error::OpenContour) if opts.refine => interior_mask(&raw_sketch.threshold(T::lit(0.5)))?,
        r => r?,
    };
    let reference = reference_map(image, &interior, opts.reference_mode)?;

    let f = models.vae.config.downsample_factor;
    let ldm_cfg = &models.ldm.config;
    if ldm_cfg.model.downsample_factor != f || ldm_cfg.model.latent_channels != models.vae.config.latent_channels {
        return Err(Error::InvalidParameter("VAE and LDM checkpoints disagree on the latent layout".into()));
    }
    let m = ldm_cfg.model.latent_multiple();
    let (w, h) = image.dims();
    let p = f * m;
    let (pw, ph) = (w.div_ceil(p) * p, h.div_ceil(p) * p);
    let image_p = image.pad_reflect_to(pw, ph);
    let soft_p = soft.pad_to(pw, ph, T::zero());
    let reference_p = reference.pad_to(pw, ph, T::zero());

    let scale = T::lit(ldm_cfg.latent_scale);
    let z_src = models.vae.encode(&Tensor::from_rasters(&[&image_p])?, None)?.mu.map(|v| v * scale);

    let (region_lat, window) = if opts.preserve_background {
        let grown = dilate(interior.pixels(), StructuringElement::Square(2 * opts.background_margin + 1));
        let lat = to_latent_grid(&grown.pad_to(pw, ph, false), f);
        let win = latent_window(&lat, opts.window, m);
        (lat, win)
    } else {
        let (lw, lh) = (pw / f, ph / f);
        (BinaryImage::filled(lw, lh, true), (0, 0, lw, lh))
    };
    let (wx, wy, ww, wh) = window;
    let cond = ConditionInputs {
        sketch: Tensor::from_rasters(&[&soft_p.crop(wx * f, wy * f, ww * f, wh * f)])?,
        reference: Tensor::from_rasters(&[&reference_p.crop(wx * f, wy * f, ww * f, wh * f)])?,
        spacing: vec![spacing],
    };
    let z_known = z_src.crop(wx, wy, ww, wh);
    let mask = binary_tensor::<T>(&region_lat.crop(wx, wy, ww, wh))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shape = z_known.shape();
    let known = opts.preserve_background.then_some(KnownRegion { z: &z_known, mask: &mask });
    let z_win = models.ldm.sample(&cond, shape, &opts.sampler, &mut rng, known)?;
    let mut z_tar = z_src;
    paste(&mut z_tar, &z_win, wx, wy);
    let inv = T::one() / scale;
    let decoded = models.vae.decode(&z_tar.map(|v| v * inv))?.raster(0, 0).crop(0, 0, w, h);

    let edit_region = BinaryImage::from_fn(w, h, |x, y| region_lat.get(x / f, y / f));
    let edited = if opts.preserve_background {
        Raster::from_fn(w, h, |x, y| {
            if edit_region.get(x, y) {
                decoded.get(x, y)
            } else {
                image.get(x, y)
            }
        })
    } else {
        decoded.clone()
    };
    if !edited.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged {
            step: opts.sampler.steps,
            detail: "non-finite edited image".into(),
        });
    }
    let difference = edited.zip_map(image, |a, b| (a - b).abs())?;
    Ok(EditResult {
        edited,
        decoded,
        soft_sketch: soft,
        sketch,
        interior,
        reference,
        difference,
        edit_region,
        seed: opts.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_grid_is_block_max() {
        let m = BinaryImage::from_fn(8, 8, |x, y| x == 5 && y == 2);
        let l = to_latent_grid(&m, 4);
        assert_eq!(l.dims(), (2, 2));
        assert!(l.get(1, 0) && l.count() == 1);
    }

    #[test]
    fn window_covers_mask_and_respects_bounds() {
        let m = BinaryImage::from_fn(32, 32, |x, y| (28..31).contains(&x) && (1..4).contains(&y));
        let (x0, y0, w, h) = latent_window(&m, Some(16), 4);
        assert_eq!((w, h), (16, 16));
        assert!(x0 + w <= 32 && x0 <= 28 && y0 == 0);
        let big = BinaryImage::from_fn(32, 32, |x, _| (2..30).contains(&x));
        assert_eq!(latent_window(&big, Some(16), 4), (2, 0, 28, 32));
        assert_eq!(latent_window(&m, None, 4), (0, 0, 32, 32));
        let odd = BinaryImage::from_fn(32, 32, |x, y| (4..21).contains(&x) && y == 9);
        let (_, _, w, h) = latent_window(&odd, Some(8), 4);
        assert_eq!((w, h), (20, 8));
    }
}
