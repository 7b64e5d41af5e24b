use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// Index batches for one epoch: a seeded shuffle of `0..n` chunked into
/// `batch_size` pieces, final short batch kept. The order is a pure function
/// of (seed, epoch).
pub fn batch_iter(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size < 2 {
        return Err(DataError::BadArg(format!(
            "batch_size {batch_size} too small: contrastive pairs need at least 2"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mix = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_examples_batch_four_gives_4_4_2() {
        let batches = batch_iter(10, 4, 0, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn covers_every_index_exactly_once() {
        let batches = batch_iter(23, 5, 9, 2).unwrap();
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_epoch_reproduces_order() {
        assert_eq!(batch_iter(16, 4, 5, 3).unwrap(), batch_iter(16, 4, 5, 3).unwrap());
        assert_ne!(batch_iter(16, 4, 5, 3).unwrap(), batch_iter(16, 4, 5, 4).unwrap());
    }

    #[test]
    fn batch_size_below_two_errors() {
        assert!(batch_iter(10, 1, 0, 0).is_err());
        assert!(batch_iter(10, 0, 0, 0).is_err());
    }
}
