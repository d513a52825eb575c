//! Record directory layout:
//!
//! ```text
//! <root>/<id>/meta.json            {id, spacing, modality}
//! <root>/<id>/slice_0000.png       16-bit grayscale, value / 65535
//! <root>/<id>/masks/slice_0000.png 8-bit {0, 255}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Modality, Spacing, VolumeRecord};
use crate::error::{Error, Result};
use crate::png_io;
use crate::raster::{BinaryImage, Raster};

pub const META_FILE: &str = "meta.json";
const MASK_DIR: &str = "masks";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: String,
    pub spacing: Spacing,
    pub modality: Modality,
}

fn slice_name(k: usize) -> String {
    format!("slice_{k:04}.png")
}

pub fn write_slice_png(path: &Path, img: &Raster<f32>) -> Result<()> {
    fs::write(path, png_io::encode_gray16(img)?)?;
    Ok(())
}

pub fn read_slice_png(path: &Path) -> Result<Raster<f32>> {
    png_io::decode_gray(&fs::read(path)?)
}

pub fn write_mask_png(path: &Path, mask: &BinaryImage) -> Result<()> {
    fs::write(path, png_io::encode_mask(mask)?)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<BinaryImage> {
    png_io::decode_mask(&fs::read(path)?)
}

/// Write `record` under `root/<id>`; the directory must not be shared with
/// another writer.
pub fn save_record(root: &Path, record: &VolumeRecord) -> Result<PathBuf> {
    record.validate()?;
    let dir = root.join(&record.id);
    fs::create_dir_all(&dir)?;
    let meta = RecordMeta {
        id: record.id.clone(),
        spacing: record.spacing,
        modality: record.modality,
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    for (k, s) in record.slices.iter().enumerate() {
        write_slice_png(&dir.join(slice_name(k)), s)?;
    }
    if let Some(masks) = &record.tumor_masks {
        let mdir = dir.join(MASK_DIR);
        fs::create_dir_all(&mdir)?;
        for (k, m) in masks.iter().enumerate() {
            write_mask_png(&mdir.join(slice_name(k)), m)?;
        }
    }
    Ok(dir)
}

pub fn load_record(dir: &Path) -> Result<VolumeRecord> {
    let meta: RecordMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
    let mut slices = Vec::new();
    let mut masks = Vec::new();
    let mut k = 0;
    loop {
        let p = dir.join(slice_name(k));
        if !p.exists() {
            break;
        }
        slices.push(read_slice_png(&p)?);
        let mp = dir.join(MASK_DIR).join(slice_name(k));
        if mp.exists() {
            masks.push(read_mask_png(&mp)?);
        }
        k += 1;
    }
    if slices.is_empty() {
        return Err(Error::InvalidRecord(format!("{}: no slices", dir.display())));
    }
    let tumor_masks = match masks.len() {
        0 => None,
        n if n == slices.len() => Some(masks),
        n => {
            return Err(Error::InvalidRecord(format!(
                "{}: {n} masks for {} slices",
                dir.display(),
                slices.len()
            )))
        }
    };
    VolumeRecord::new(meta.id, slices, meta.spacing, meta.modality, tumor_masks)
}

/// Record directories (those holding `meta.json`) under `root`, sorted by name.
pub fn list_record_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if path.is_dir() && path.join(META_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<VolumeRecord>> {
    list_record_dirs(root)?
        .iter()
        .map(|d| load_record(d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, random_phantom_spec};

    #[test]
    fn save_load_round_trip_is_quantization_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = generate_phantom(&random_phantom_spec("case_01", 32, 5)).unwrap();
        save_record(tmp.path(), &rec).unwrap();
        let back = load_record(&tmp.path().join("case_01")).unwrap();
        assert_eq!(back.id, rec.id);
        assert_eq!(back.spacing, rec.spacing);
        assert_eq!(back.tumor_masks, rec.tumor_masks);
        for (a, b) in rec.slices[0].data().iter().zip(back.slices[0].data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        let listed = load_dataset(tmp.path()).unwrap();
        assert_eq!(listed.len(), 1);
    }
}
