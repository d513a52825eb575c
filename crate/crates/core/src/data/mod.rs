//! Dataset records, intensity normalization, phantoms and splits.

mod io;
mod normalize;
mod phantom;
mod split;

pub use io::{
    list_record_dirs, load_dataset, load_record, read_mask_png, read_slice_png, save_record,
    write_mask_png, write_slice_png, RecordMeta, META_FILE,
};
pub use normalize::{normalize_intensities, percentile};
pub use phantom::{generate_phantom, random_phantom_spec, Ellipse, PhantomSpec};
pub use split::split_dataset;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryImage, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "MRI")]
    Mri,
    #[serde(rename = "CT")]
    Ct,
}

/// Physical voxel size in millimetres along three axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn new(v: [f64; 3]) -> Result<Self> {
        if v.iter().all(|c| c.is_finite() && *c > 0.0) {
            Ok(Spacing(v))
        } else {
            Err(Error::InvalidParameter(format!(
                "spacing components must be positive, got {v:?}"
            )))
        }
    }

    pub fn isotropic(mm: f64) -> Self {
        Spacing([mm; 3])
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::isotropic(1.0)
    }
}

/// A stack of normalized 2D slices sharing spacing and modality.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub id: String,
    pub slices: Vec<Raster<f32>>,
    pub spacing: Spacing,
    pub modality: Modality,
    pub tumor_masks: Option<Vec<BinaryImage>>,
}

impl VolumeRecord {
    pub fn new(
        id: impl Into<String>,
        slices: Vec<Raster<f32>>,
        spacing: Spacing,
        modality: Modality,
        tumor_masks: Option<Vec<BinaryImage>>,
    ) -> Result<Self> {
        let rec = Self {
            id: id.into(),
            slices,
            spacing,
            modality,
            tumor_masks,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        Spacing::new(self.spacing.0)?;
        for (k, s) in self.slices.iter().enumerate() {
            if let Some(v) = s.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidRecord(format!(
                    "{}: slice {k} has value {v} outside [0,1]",
                    self.id
                )));
            }
        }
        if let Some(masks) = &self.tumor_masks {
            if masks.len() != self.slices.len() {
                return Err(Error::InvalidRecord(format!(
                    "{}: {} masks for {} slices",
                    self.id,
                    masks.len(),
                    self.slices.len()
                )));
            }
            for (m, s) in masks.iter().zip(&self.slices) {
                s.ensure_same_dims(m)?;
            }
        }
        Ok(())
    }

    pub fn mask(&self, k: usize) -> Option<&BinaryImage> {
        self.tumor_masks.as_ref().and_then(|m| m.get(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_rejects_out_of_range_and_bad_spacing() {
        let s = Raster::filled(4, 4, 1.5f32);
        assert!(VolumeRecord::new("a", vec![s], Spacing::default(), Modality::Ct, None).is_err());
        let ok = Raster::filled(4, 4, 0.5f32);
        assert!(VolumeRecord::new("a", vec![ok.clone()], Spacing([1.0, 0.0, 1.0]), Modality::Ct, None).is_err());
        let wrong = BinaryImage::filled(3, 4, false);
        assert!(VolumeRecord::new("a", vec![ok], Spacing::default(), Modality::Ct, Some(vec![wrong])).is_err());
    }
}
