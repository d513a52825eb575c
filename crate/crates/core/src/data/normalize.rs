use super::Modality;
use crate::error::Result;
use crate::raster::Raster;
use crate::scalar::Scalar;

const MRI_UPPER_PERCENTILE: f64 = 99.5;
const CT_WINDOW: (f64, f64) = (-1000.0, 1000.0);

/// Percentile with linear interpolation between closest ranks (`q` in [0, 100]).
pub fn percentile<T: Scalar>(values: &[T], q: f64) -> T {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let rank = q.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = T::lit(rank - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clip to the modality window and map affinely onto [0, 1].
///
/// MRI uses the per-slice [0th, 99.5th] percentile window; a slice whose
/// window collapses maps to zeros. CT uses the fixed [-1000, 1000] HU window.
pub fn normalize_intensities<T: Scalar>(raw: &Raster<T>, modality: Modality) -> Result<Raster<T>> {
    raw.ensure_finite()?;
    let (lo, hi) = match modality {
        Modality::Mri => (
            percentile(raw.data(), 0.0),
            percentile(raw.data(), MRI_UPPER_PERCENTILE),
        ),
        Modality::Ct => (T::lit(CT_WINDOW.0), T::lit(CT_WINDOW.1)),
    };
    if hi <= lo {
        return Ok(Raster::zeros(raw.width(), raw.height()));
    }
    let range = hi - lo;
    Ok(raw.map(|v| (v.max(lo).min(hi) - lo) / range))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ct_endpoints_and_midpoint() {
        let r = Raster::from_vec(3, 1, vec![-1000.0f64, 1000.0, 0.0]).unwrap();
        let n = normalize_intensities(&r, Modality::Ct).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0, 0.5]);
        let clipped = Raster::from_vec(2, 1, vec![-3000.0f64, 4000.0]).unwrap();
        assert_eq!(normalize_intensities(&clipped, Modality::Ct).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn mri_constant_slice_maps_to_zero() {
        let r = Raster::filled(5, 5, 7.3f32);
        let n = normalize_intensities(&r, Modality::Mri).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mri_ramp_matches_bruteforce_percentile() {
        // ramp 0..=1000, 1001 samples
        let r = Raster::from_fn(1001, 1, |x, _| x as f64);
        let n = normalize_intensities(&r, Modality::Mri).unwrap();
        // brute force: the value below which 99.5% of the (n-1) rank gaps fall
        let sorted: Vec<f64> = (0..=1000).map(|v| v as f64).collect();
        let rank: f64 = 0.995 * 1000.0;
        let p995 = sorted[rank as usize] + (rank - rank.floor()) * (sorted[rank as usize + 1] - sorted[rank as usize]);
        assert_eq!(p995, 995.0);
        let (_, max) = n.min_max();
        assert_eq!(max, 1.0);
        assert_eq!(n.get(995, 0), 1.0);
        assert!(n.get(994, 0) < 1.0);
        assert!((n.get(500, 0) - 500.0 / p995).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_rejected() {
        let r = Raster::from_vec(2, 1, vec![0.0f32, f32::NAN]).unwrap();
        assert!(normalize_intensities(&r, Modality::Ct).is_err());
    }

    #[test]
    fn ct_map_on_normalized_values_lands_in_narrow_band() {
        let r = Raster::from_fn(11, 1, |x, _| x as f64 / 10.0);
        let n = normalize_intensities(&r, Modality::Ct).unwrap();
        assert!(n.data().iter().all(|&v| (0.5..=0.5005).contains(&v)));
    }
}
