use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, Spacing, VolumeRecord};
use crate::error::{Error, Result};
use crate::filters::gaussian_blur;
use crate::raster::{BinaryImage, Raster};

const BACKGROUND_LEVEL: f64 = 0.05;
const TEXTURE_AMPLITUDE: f64 = 0.03;
const EDGE_SOFTNESS: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction, pixels.
    pub a: f64,
    /// Semi-axis along the rotated y direction, pixels.
    pub b: f64,
    /// Rotation in radians.
    pub angle: f64,
    /// Organ: absolute intensity. Tumor: offset added on top of the organ.
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Half extents of the axis-aligned bounding box.
    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (
            ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt(),
            ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt(),
        )
    }

    fn rasterize(&self, size: usize) -> BinaryImage {
        BinaryImage::from_fn(size, size, |x, y| self.contains(x as f64, y as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub id: String,
    pub image_size: usize,
    pub organ: Ellipse,
    pub tumor: Ellipse,
    /// Standard deviation of the Gaussian applied to the uniform noise texture.
    pub background_texture_scale: f64,
    pub seed: u64,
    pub spacing: Spacing,
    pub modality: Modality,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.image_size < 8 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        for (name, e) in [("organ", &self.organ), ("tumor", &self.tumor)] {
            if !(e.a > 0.0 && e.b > 0.0) {
                return bad(format!("{name} axes must be positive, got ({}, {})", e.a, e.b));
            }
            if ![e.cx, e.cy, e.angle, e.intensity].iter().all(|v| v.is_finite()) {
                return bad(format!("{name} ellipse has non-finite fields"));
            }
        }
        let (hx, hy) = self.tumor.half_extents();
        let max = (self.image_size - 1) as f64;
        if self.tumor.cx - hx < 0.0
            || self.tumor.cy - hy < 0.0
            || self.tumor.cx + hx > max
            || self.tumor.cy + hy > max
        {
            return bad("tumor ellipse exceeds image bounds".into());
        }
        if !(self.background_texture_scale >= 0.0) {
            return bad("background_texture_scale must be >= 0".into());
        }
        Spacing::new(self.spacing.0)?;
        Ok(())
    }
}

/// Render a single-slice phantom with its exact tumor mask.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<VolumeRecord> {
    spec.validate()?;
    let n = spec.image_size;
    let organ = spec.organ.rasterize(n);
    let tumor = spec.tumor.rasterize(n);

    let shape = Raster::from_fn(n, n, |x, y| {
        let mut v = BACKGROUND_LEVEL;
        if organ.get(x, y) {
            v = spec.organ.intensity;
        }
        if tumor.get(x, y) {
            v += spec.tumor.intensity;
        }
        v
    });
    let shape = gaussian_blur(&shape, EDGE_SOFTNESS);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Raster::from_fn(n, n, |_, _| rng.random::<f64>());
    let texture = gaussian_blur(&noise, spec.background_texture_scale);
    let mean = texture.mean();
    let std = (texture.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / texture.len() as f64)
        .sqrt()
        .max(1e-12);

    let slice = shape
        .zip_map(&texture, |s, t| {
            (s + TEXTURE_AMPLITUDE * (t - mean) / std).clamp(0.0, 1.0) as f32
        })?;
    VolumeRecord::new(
        spec.id.clone(),
        vec![slice],
        spec.spacing,
        spec.modality,
        Some(vec![tumor]),
    )
}

/// Randomized phantom layout: a tumor placed inside a larger organ.
pub fn random_phantom_spec(id: impl Into<String>, image_size: usize, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a47);
    let s = image_size as f64;
    let mid = (s - 1.0) / 2.0;
    let organ = Ellipse {
        cx: mid + rng.random_range(-0.06..0.06) * s,
        cy: mid + rng.random_range(-0.06..0.06) * s,
        a: rng.random_range(0.28..0.38) * s,
        b: rng.random_range(0.24..0.34) * s,
        angle: rng.random_range(0.0..std::f64::consts::PI),
        intensity: rng.random_range(0.35..0.5),
    };
    let ta = rng.random_range(0.05..0.11) * s;
    let tb = rng.random_range(0.05..0.11) * s;
    let room = (organ.a.min(organ.b) - ta.max(tb) - 3.0).max(0.0);
    let r = rng.random_range(0.0..1.0f64).sqrt() * room * 0.8;
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let tumor = Ellipse {
        cx: organ.cx + r * theta.cos(),
        cy: organ.cy + r * theta.sin(),
        a: ta,
        b: tb,
        angle: rng.random_range(0.0..std::f64::consts::PI),
        intensity: rng.random_range(0.25..0.4),
    };
    let spacing = Spacing([
        rng.random_range(0.7..1.5),
        rng.random_range(0.7..1.5),
        rng.random_range(1.0..5.0),
    ]);
    let modality = if rng.random_bool(0.5) {
        Modality::Mri
    } else {
        Modality::Ct
    };
    PhantomSpec {
        id: id.into(),
        image_size,
        organ,
        tumor,
        background_texture_scale: 3.0,
        seed,
        spacing,
        modality,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with_tumor(a: f64, b: f64) -> PhantomSpec {
        PhantomSpec {
            id: "p".into(),
            image_size: 128,
            organ: Ellipse { cx: 64.0, cy: 64.0, a: 45.0, b: 40.0, angle: 0.3, intensity: 0.45 },
            tumor: Ellipse { cx: 60.0, cy: 66.0, a, b, angle: 0.0, intensity: 0.3 },
            background_texture_scale: 3.0,
            seed: 9,
            spacing: Spacing::default(),
            modality: Modality::Mri,
        }
    }

    #[test]
    fn tumor_mask_area_matches_ellipse() {
        let rec = generate_phantom(&spec_with_tumor(10.0, 8.0)).unwrap();
        // brute-force count of pixel centres inside the ellipse
        let mut count = 0;
        for y in 0..128 {
            for x in 0..128 {
                let (dx, dy) = (x as f64 - 60.0, y as f64 - 66.0);
                if (dx / 10.0).powi(2) + (dy / 8.0).powi(2) <= 1.0 {
                    count += 1;
                }
            }
        }
        let area = rec.mask(0).unwrap().count();
        assert_eq!(area, count);
        let expected = std::f64::consts::PI * 80.0;
        assert!((area as f64 - expected).abs() / expected < 0.03, "{area}");
    }

    #[test]
    fn zero_axes_and_out_of_bounds_fail() {
        assert!(generate_phantom(&spec_with_tumor(0.0, 8.0)).is_err());
        let mut s = spec_with_tumor(10.0, 8.0);
        s.tumor.cx = 5.0;
        assert!(generate_phantom(&s).is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom(&spec_with_tumor(10.0, 8.0)).unwrap();
        let b = generate_phantom(&spec_with_tumor(10.0, 8.0)).unwrap();
        assert_eq!(a, b);
        let spec = random_phantom_spec("q", 128, 77);
        assert_eq!(spec, random_phantom_spec("q", 128, 77));
        let rec = generate_phantom(&spec).unwrap();
        rec.validate().unwrap();
        assert!(rec.mask(0).unwrap().count() > 50);
    }

    #[test]
    fn random_specs_are_valid() {
        for seed in 0..200 {
            random_phantom_spec("r", 128, seed).validate().unwrap();
            random_phantom_spec("r", 64, seed).validate().unwrap();
        }
    }
}
