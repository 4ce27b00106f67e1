use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded shuffle, then the first `round(len * train_fraction)` items (at
/// least one, leaving at least one) go to the training split.
pub fn split_dataset<T: Clone>(records: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if records.len() < 2 {
        return Err(Error::invalid(
            "split_dataset",
            format!("need at least 2 records, got {}", records.len()),
        ));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("split_dataset", format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((records.len() as f64 * train_fraction).round() as usize).clamp(1, records.len() - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_records_split_eight_two() {
        let items: Vec<u32> = (0..10).collect();
        let (train, val) = split_dataset(&items, 0.8, 3).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let mut all: Vec<u32> = train.iter().chain(&val).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_dataset(&items, 0.8, 3).unwrap(), (train, val));
    }

    #[test]
    fn rejects_too_few() {
        assert!(split_dataset::<u8>(&[], 0.8, 0).is_err());
        assert!(split_dataset(&[1], 0.8, 0).is_err());
    }
}
