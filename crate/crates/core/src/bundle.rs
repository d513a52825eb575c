//! The three trained checkpoints loaded together from one directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edit::{edit_image, EditModels, EditOptions, EditResult};
use crate::error::{Error, Result};
use crate::ldm::Ldm;
use crate::raster::Raster;
use crate::refiner::Refiner;
use crate::scalar::Scalar;
use crate::vae::Vae;

pub const REFINER_FILE: &str = "refiner.ckpt";
pub const VAE_FILE: &str = "vae.ckpt";
pub const LDM_FILE: &str = "ldm.ckpt";

/// `<kind>-<first 12 hex digits of the checkpoint's sha256>` per stage.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersions {
    pub refiner: Option<String>,
    pub vae: Option<String>,
    pub ldm: Option<String>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn version_of(path: &Path, kind: &str) -> Option<String> {
    file_sha256(path).ok().map(|h| format!("{kind}-{}", &h[..12]))
}

impl ModelVersions {
    /// Versions of whichever checkpoints exist under `dir`.
    pub fn scan(dir: &Path) -> Self {
        Self {
            refiner: version_of(&dir.join(REFINER_FILE), "refiner"),
            vae: version_of(&dir.join(VAE_FILE), "vae"),
            ldm: version_of(&dir.join(LDM_FILE), "ldm"),
        }
    }

    pub fn missing(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (name, v) in [("refiner", &self.refiner), ("vae", &self.vae), ("ldm", &self.ldm)] {
            if v.is_none() {
                out.push(name);
            }
        }
        out
    }
}

pub struct ModelBundle<T: Scalar> {
    pub refiner: Refiner<T>,
    pub vae: Vae<T>,
    pub ldm: Ldm<T>,
    pub versions: ModelVersions,
    pub dir: PathBuf,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn load(dir: &Path) -> Result<Self> {
        let versions = ModelVersions::scan(dir);
        let missing = versions.missing();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing {} under {}", missing.join(", "), dir.display())));
        }
        Ok(Self {
            refiner: Refiner::load(&dir.join(REFINER_FILE))?,
            vae: Vae::load(&dir.join(VAE_FILE))?.0,
            ldm: Ldm::load(&dir.join(LDM_FILE))?,
            versions,
            dir: dir.to_path_buf(),
        })
    }

    pub fn models(&self) -> EditModels<'_, T> {
        EditModels {
            refiner: &self.refiner,
            vae: &self.vae,
            ldm: &self.ldm,
        }
    }

    pub fn edit(&self, image: &Raster<T>, sketch: &Raster<T>, spacing: [f64; 3], opts: &EditOptions) -> Result<EditResult<T>> {
        edit_image(image, sketch, spacing, &self.models(), opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_checkpoints_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        assert_eq!(ModelVersions::scan(tmp.path()).missing(), vec!["refiner", "vae", "ldm"]);
        std::fs::write(tmp.path().join(VAE_FILE), b"abc").unwrap();
        let v = ModelVersions::scan(tmp.path());
        // sha256("abc") = ba7816bf8f01cfea414140de5dae2223...
        assert_eq!(v.vae.as_deref(), Some("vae-ba7816bf8f01"));
        assert_eq!(v.missing(), vec!["refiner", "ldm"]);
        assert!(ModelBundle::<f32>::load(tmp.path()).is_err());
    }
}
