use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Shuffled mini-batches of indices `0..n` for one epoch.
///
/// The order depends only on `(seed, epoch)`. With `drop_last` the ragged
/// tail is discarded.
pub fn batch_iter(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Data("cannot batch an empty manifest".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "epoch-order", &[epoch as u64]));
    Ok(order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drop_last_counts() {
        assert_eq!(batch_iter(10, 4, 0, 0, true).unwrap().len(), 2);
        assert_eq!(batch_iter(10, 4, 0, 0, false).unwrap().len(), 3);
    }

    #[test]
    fn order_is_a_function_of_seed_and_epoch() {
        assert_eq!(
            batch_iter(50, 7, 3, 2, false).unwrap(),
            batch_iter(50, 7, 3, 2, false).unwrap()
        );
        assert_ne!(
            batch_iter(50, 7, 3, 2, false).unwrap(),
            batch_iter(50, 7, 3, 3, false).unwrap()
        );
    }

    #[test]
    fn batches_partition_the_manifest() {
        let mut all: Vec<usize> = batch_iter(23, 5, 9, 0, false).unwrap().concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn empty_manifest_is_data_error() {
        assert!(matches!(batch_iter(0, 4, 0, 0, false), Err(Error::Data(_))));
    }
}
