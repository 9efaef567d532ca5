use rand::Rng;

use super::CellDataset;
use crate::error::{Error, Result};
use crate::seed;

fn check_fraction(n: usize, train_fraction: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 cells, have {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    Ok(())
}

fn fisher_yates<R: Rng>(indices: &mut [usize], rng: &mut R) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Seeded shuffle of `0..n`, cut after `floor(n·train_fraction)` entries.
/// Both halves keep permutation order.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_fraction(n, train_fraction)?;
    let mut perm: Vec<usize> = (0..n).collect();
    fisher_yates(&mut perm, &mut seed::stream(seed, "split"));
    let n_train = (n as f64 * train_fraction).floor() as usize;
    let test = perm.split_off(n_train);
    Ok((perm, test))
}

/// Uniform random train/test split; each side keeps the original row order.
pub fn split_dataset(ds: &CellDataset, train_fraction: f64, seed: u64) -> Result<(CellDataset, CellDataset)> {
    let (mut train, mut test) = split_indices(ds.len(), train_fraction, seed)?;
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Per-class split: each class contributes `floor(n_c·train_fraction)` cells
/// to the training side. Unlabeled cells form their own stratum.
pub fn split_dataset_stratified(
    ds: &CellDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(CellDataset, CellDataset)> {
    check_fraction(ds.len(), train_fraction)?;
    let mut rng = seed::stream(seed, "split.stratified");
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes() + 1];
    for (i, l) in ds.labels().iter().enumerate() {
        strata[l.unwrap_or(ds.n_classes())].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut s in strata {
        fisher_yates(&mut s, &mut rng);
        let k = (s.len() as f64 * train_fraction).floor() as usize;
        test.extend_from_slice(&s[k..]);
        s.truncate(k);
        train.extend(s);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}
