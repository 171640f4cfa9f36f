use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Fold id of every case, in manifest order: a seeded shuffle followed by
/// round-robin assignment, so fold sizes differ by at most one.
pub fn crossval_split(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<usize>> {
    fold_ids(manifest.cases.len(), k, seed)
}

pub fn fold_ids(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid(format!(
            "cross-validation needs k >= 2, got {k}"
        )));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} cases cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &case) in order.iter().enumerate() {
        folds[case] = pos % k;
    }
    Ok(folds)
}

/// Writes the fold ids into the case records.
pub fn assign_folds(manifest: &mut DatasetManifest, k: usize, seed: u64) -> Result<()> {
    let folds = crossval_split(manifest, k, seed)?;
    for (case, fold) in manifest.cases.iter_mut().zip(folds) {
        case.fold = Some(fold);
    }
    Ok(())
}
