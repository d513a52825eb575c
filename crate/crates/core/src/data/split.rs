use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::VolumeRecord;
use crate::error::{Error, Result};

const TRAIN_FRACTION: f64 = 0.8;
const MIN_RECORDS: usize = 5;

/// 8:2 train/test split, deterministic in `seed`.
///
/// Records are sorted by id before shuffling, so the partition does not
/// depend on input order.
pub fn split_dataset(
    records: Vec<VolumeRecord>,
    seed: u64,
) -> Result<(Vec<VolumeRecord>, Vec<VolumeRecord>)> {
    if records.len() < MIN_RECORDS {
        return Err(Error::TooFewRecords {
            min: MIN_RECORDS,
            got: records.len(),
        });
    }
    let mut records = records;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let n_train = (TRAIN_FRACTION * records.len() as f64).round() as usize;
    let test = records.split_off(n_train);
    Ok((records, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Modality, Spacing};
    use crate::raster::Raster;

    fn recs(n: usize) -> Vec<VolumeRecord> {
        (0..n)
            .map(|i| {
                VolumeRecord::new(
                    format!("r{i:03}"),
                    vec![Raster::filled(2, 2, 0.0)],
                    Spacing::default(),
                    Modality::Mri,
                    None,
                )
                .unwrap()
            })
            .collect()
    }

    fn ids(v: &[VolumeRecord]) -> Vec<String> {
        v.iter().map(|r| r.id.clone()).collect()
    }

    #[test]
    fn ten_records_split_eight_two() {
        let (tr, te) = split_dataset(recs(10), 3).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let mut all = [ids(&tr), ids(&te)].concat();
        all.sort();
        assert_eq!(all, ids(&recs(10)));
    }

    #[test]
    fn five_records_split_four_one() {
        let (tr, te) = split_dataset(recs(5), 0).unwrap();
        assert_eq!((tr.len(), te.len()), (4, 1));
    }

    #[test]
    fn fewer_than_five_is_an_error() {
        assert!(matches!(
            split_dataset(recs(4), 0),
            Err(Error::TooFewRecords { .. })
        ));
    }

    #[test]
    fn deterministic_and_order_independent() {
        let (a, b) = split_dataset(recs(10), 42).unwrap();
        let (c, d) = split_dataset(recs(10), 42).unwrap();
        assert_eq!((ids(&a), ids(&b)), (ids(&c), ids(&d)));
        let mut rev = recs(10);
        rev.reverse();
        let (e, f) = split_dataset(rev, 42).unwrap();
        assert_eq!((ids(&a), ids(&b)), (ids(&e), ids(&f)));
    }
}
