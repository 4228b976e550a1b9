use rand::seq::SliceRandom;

use super::Dataset;
use crate::{seed, Error, Result};

/// Sizes of each part: `floor(n * f_i)`, then the leftover instances go one
/// at a time to the earliest fractions.
pub fn partition_sizes(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    if fractions.is_empty() {
        return Err(Error::Empty("split fractions"));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::invalid(format!("split fraction {f} outside (0, 1]")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {total}, not 1")));
    }
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| (n as f64 * f + 1e-9).floor() as usize)
        .collect();
    let mut left = n - sizes.iter().sum::<usize>();
    for s in sizes.iter_mut() {
        if left == 0 {
            break;
        }
        *s += 1;
        left -= 1;
    }
    Ok(sizes)
}

/// Shuffles `0..n` with the `"split"` stream of `seed` and cuts it into parts.
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let sizes = partition_sizes(n, fractions)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, "split"));
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        parts.push(order[start..start + s].to_vec());
        start += s;
    }
    Ok(parts)
}

/// Global random partition of the instances.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    Ok(split_indices(dataset.len(), fractions, seed)?
        .iter()
        .map(|idx| dataset.subset(idx))
        .collect())
}

/// `(train, test)` with the `"test"` stream of the experiment seed; the
/// CLI and the acceptance runs both hold out test data this way.
pub fn train_test_split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut parts = split(
        dataset,
        &[1.0 - test_fraction, test_fraction],
        seed::derive(seed, "test"),
    )?
    .into_iter();
    match (parts.next(), parts.next()) {
        (Some(train), Some(test)) => Ok((train, test)),
        _ => unreachable!("two fractions give two parts"),
    }
}
