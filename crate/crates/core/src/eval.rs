//! Evaluation suite over annotated slices and the edit metrics it relies on.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{dice, nrmse, otsu_threshold, psnr, ssim};
use crate::morphology::{dilate, StructuringElement};
use crate::pipeline::AnnotatedSlice;
use crate::raster::{BinaryImage, Raster};
use crate::scalar::Scalar;
use crate::sketch::{extract_edges, synthesize_training_pair, DeformationParams};

/// Radius, in pixels, of the neighbourhood around the interior that counts
/// as "inside" for locality and segmentation.
pub const REGION_RADIUS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionTag {
    /// Clean edge map of the ground-truth mask.
    AccurateEdge,
    /// Synthesized sketch passed through the refiner.
    RefinedSketch,
    /// Synthesized sketch used as is.
    Unrefined,
}

impl ConditionTag {
    pub const ALL: [ConditionTag; 3] = [Self::AccurateEdge, Self::RefinedSketch, Self::Unrefined];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AccurateEdge => "accurate-edge",
            Self::RefinedSketch => "refined-sketch",
            Self::Unrefined => "unrefined",
        }
    }

    pub fn uses_refiner(self) -> bool {
        self != Self::Unrefined
    }
}

impl std::str::FromStr for ConditionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown condition tag {s}")))
    }
}

/// `mask` dilated by a `(2r+1)` square.
pub fn grow(mask: &BinaryImage, r: usize) -> BinaryImage {
    dilate(mask, StructuringElement::Square(2 * r + 1))
}

/// Share of `sum (edited - source)^2` falling inside `region`; 1 when
/// nothing changed.
pub fn energy_inside<T: Scalar>(source: &Raster<T>, edited: &Raster<T>, region: &BinaryImage) -> Result<f64> {
    source.ensure_same_dims(edited)?;
    source.ensure_same_dims(region)?;
    let (mut inside, mut total) = (0.0, 0.0);
    for ((&a, &b), &m) in source.data().iter().zip(edited.data()).zip(region.data()) {
        let d = (b - a).as_f64();
        total += d * d;
        if m {
            inside += d * d;
        }
    }
    Ok(if total > 0.0 { inside / total } else { 1.0 })
}

/// Threshold-oracle segmentation: Otsu inside the grown interior.
pub fn threshold_segment<T: Scalar>(image: &Raster<T>, interior: &BinaryImage) -> BinaryImage {
    let region = grow(interior, REGION_RADIUS);
    let t = otsu_threshold(image, Some(&region));
    BinaryImage::from_fn(image.width(), image.height(), |x, y| region.get(x, y) && image.get(x, y) > t)
}

/// Raw sketch presented to the editor under `tag`. Synthesized sketches are
/// seeded per slice so every tag and rerun sees the same stroke; a mask too
/// small to survive deformation falls back to its edge map.
pub fn condition_sketch(mask: &BinaryImage, tag: ConditionTag, params: &DeformationParams, seed: u64) -> Result<BinaryImage> {
    match tag {
        ConditionTag::AccurateEdge => Ok(extract_edges(mask)?.into_inner()),
        ConditionTag::RefinedSketch | ConditionTag::Unrefined => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match synthesize_training_pair(mask, params, &mut rng) {
                Ok((sketch, _)) => Ok(sketch),
                Err(Error::DegenerateSketch { .. }) => Ok(extract_edges(mask)?.into_inner()),
                Err(e) => Err(e),
            }
        }
    }
}

/// What an edit function hands back to the suite.
#[derive(Clone, Debug)]
pub struct EditOutcome<T> {
    pub edited: Raster<T>,
    pub interior: BinaryImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image_id: String,
    pub condition: ConditionTag,
    pub nrmse: f64,
    pub ssim: f64,
    pub psnr: f64,
    /// Segmentation of the edit against the ground-truth mask.
    pub dice: f64,
    /// Segmentation of the edit against the sketch interior.
    pub dice_interior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub condition: ConditionTag,
    pub count: usize,
    pub nrmse: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub dice: f64,
    pub dice_interior: f64,
}

/// A case the edit function declined, e.g. a sketch that stayed open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCase {
    pub image_id: String,
    pub condition: ConditionTag,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub images: Vec<ImageScores>,
    pub aggregates: Vec<AggregateScores>,
    #[serde(default)]
    pub skipped: Vec<SkippedCase>,
}

impl EvalReport {
    pub fn from_images(dataset_id: impl Into<String>, images: Vec<ImageScores>, skipped: Vec<SkippedCase>) -> Self {
        let mut tags: Vec<ConditionTag> = images.iter().map(|s| s.condition).collect();
        tags.sort();
        tags.dedup();
        let aggregates = tags
            .into_iter()
            .map(|tag| {
                let rows: Vec<&ImageScores> = images.iter().filter(|s| s.condition == tag).collect();
                let n = rows.len() as f64;
                let mean = |f: fn(&ImageScores) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
                AggregateScores {
                    condition: tag,
                    count: rows.len(),
                    nrmse: mean(|r| r.nrmse),
                    ssim: mean(|r| r.ssim),
                    psnr: mean(|r| r.psnr),
                    dice: mean(|r| r.dice),
                    dice_interior: mean(|r| r.dice_interior),
                }
            })
            .collect();
        Self {
            dataset_id: dataset_id.into(),
            images,
            aggregates,
            skipped,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.aggregates
            .iter()
            .all(|a| [a.nrmse, a.ssim, a.psnr, a.dice, a.dice_interior].iter().all(|v| v.is_finite()))
    }

    pub fn aggregate(&self, tag: ConditionTag) -> Option<&AggregateScores> {
        self.aggregates.iter().find(|a| a.condition == tag)
    }

    /// Per-image rows followed by one `mean` row per condition.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidParameter(format!("csv: {e}"));
        w.write_record(["dataset", "image", "condition", "nrmse", "ssim", "psnr", "dice", "dice_interior"])
            .map_err(csv_err)?;
        let row = |id: &str, c: ConditionTag, v: [f64; 5]| {
            let mut r = vec![self.dataset_id.clone(), id.to_string(), c.as_str().to_string()];
            r.extend(v.iter().map(|x| format!("{x:.6}")));
            r
        };
        for s in &self.images {
            w.write_record(row(&s.image_id, s.condition, [s.nrmse, s.ssim, s.psnr, s.dice, s.dice_interior]))
                .map_err(csv_err)?;
        }
        for a in &self.aggregates {
            w.write_record(row("mean", a.condition, [a.nrmse, a.ssim, a.psnr, a.dice, a.dice_interior]))
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidParameter(e.to_string()))
    }

    /// Writes `report.csv` and `report.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Run `edit_fn` on every slice under every tag and score the results
/// against the source image and the ground-truth mask. Cases for which
/// `edit_fn` returns `Ok(Err(reason))` are listed as skipped; errors abort.
pub fn evaluate_suite<T: Scalar>(
    dataset_id: &str,
    slices: &[(String, AnnotatedSlice<T>)],
    tags: &[ConditionTag],
    mut edit_fn: impl FnMut(&str, &AnnotatedSlice<T>, ConditionTag) -> Result<std::result::Result<EditOutcome<T>, String>>,
    segment_fn: impl Fn(&Raster<T>, &BinaryImage) -> BinaryImage,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(slices.len() * tags.len());
    let mut skipped = Vec::new();
    for &tag in tags {
        for (id, s) in slices {
            let out = match edit_fn(id, s, tag)? {
                Ok(out) => out,
                Err(reason) => {
                    skipped.push(SkippedCase { image_id: id.clone(), condition: tag, reason });
                    continue;
                }
            };
            let seg = segment_fn(&out.edited, &out.interior);
            rows.push(ImageScores {
                image_id: id.clone(),
                condition: tag,
                nrmse: nrmse(&s.image, &out.edited)?.as_f64(),
                ssim: ssim(&s.image, &out.edited)?.as_f64(),
                psnr: psnr(&s.image, &out.edited)?.as_f64(),
                dice: dice(&seg, &s.mask)?,
                dice_interior: dice(&seg, &out.interior)?,
            });
        }
    }
    Ok(EvalReport::from_images(dataset_id, rows, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(seed: u64) -> AnnotatedSlice<f64> {
        let mask = BinaryImage::from_fn(32, 32, |x, y| (x as f64 - 15.0).hypot(y as f64 - 16.0) < 6.0 + seed as f64);
        let image = Raster::from_fn(32, 32, |x, y| if mask.get(x, y) { 0.8 } else { 0.1 + 0.01 * ((x * y) % 5) as f64 });
        AnnotatedSlice { image, mask, spacing: [1.0, 1.0, 2.0] }
    }

    #[test]
    fn identity_edit_is_a_fixed_point() {
        let slices: Vec<_> = (0..3).map(|i| (format!("s{i}"), slice(i))).collect();
        let report = evaluate_suite(
            "toy",
            &slices,
            &ConditionTag::ALL,
            |_, s, _| Ok(Ok(EditOutcome { edited: s.image.clone(), interior: s.mask.clone() })),
            |_, interior| interior.clone(),
        )
        .unwrap();
        assert_eq!(report.images.len(), 9);
        assert_eq!(report.aggregates.len(), 3);
        for a in &report.aggregates {
            assert_eq!((a.nrmse, a.ssim, a.psnr, a.dice, a.dice_interior), (0.0, 1.0, 100.0, 1.0, 1.0));
            assert_eq!(a.count, 3);
        }
        assert!(report.all_finite());
        let csv = report.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 9 + 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("toy,s0,accurate-edge,0.000000,1.000000,100.000000"));
        let tmp = tempfile::tempdir().unwrap();
        report.write(tmp.path()).unwrap();
        let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn aggregates_are_means() {
        let mk = |i: usize, v: f64| ImageScores {
            image_id: format!("{i}"),
            condition: ConditionTag::Unrefined,
            nrmse: v,
            ssim: 2.0 * v,
            psnr: 10.0 * v,
            dice: v / 2.0,
            dice_interior: 1.0 - v,
        };
        let r = EvalReport::from_images("d", vec![mk(0, 0.1), mk(1, 0.3), mk(2, 0.8)], vec![]);
        let a = r.aggregate(ConditionTag::Unrefined).unwrap();
        assert!((a.nrmse - 0.4).abs() < 1e-12 && (a.psnr - 4.0).abs() < 1e-12 && (a.dice_interior - 0.6).abs() < 1e-12);
        assert!(r.aggregate(ConditionTag::AccurateEdge).is_none());
    }

    #[test]
    fn threshold_segmentation_recovers_a_bright_disk() {
        let s = slice(2);
        let seg = threshold_segment(&s.image, &s.mask);
        assert_eq!(dice(&seg, &s.mask).unwrap(), 1.0);
    }

    #[test]
    fn energy_split() {
        let src = Raster::filled(10, 10, 0.0f64);
        let mut ed = src.clone();
        ed.set(2, 2, 3.0);
        ed.set(8, 8, 1.0);
        let region = BinaryImage::from_fn(10, 10, |x, y| x < 5 && y < 5);
        assert!((energy_inside(&src, &ed, &region).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(energy_inside(&src, &src, &region).unwrap(), 1.0);
        assert_eq!(grow(&BinaryImage::from_fn(20, 20, |x, y| x == 10 && y == 10), 5).count(), 121);
    }

    #[test]
    fn tags_parse_and_sketches_are_reproducible() {
        for t in ConditionTag::ALL {
            assert_eq!(t.as_str().parse::<ConditionTag>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.as_str()));
        }
        assert!("other".parse::<ConditionTag>().is_err());
        let m = slice(3).mask;
        let p = DeformationParams::default();
        assert_eq!(condition_sketch(&m, ConditionTag::AccurateEdge, &p, 1).unwrap(), extract_edges(&m).unwrap().into_inner());
        let a = condition_sketch(&m, ConditionTag::RefinedSketch, &p, 4).unwrap();
        assert_eq!(a, condition_sketch(&m, ConditionTag::Unrefined, &p, 4).unwrap());
    }
}
