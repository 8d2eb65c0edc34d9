use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Splits indices into `k` disjoint folds with per-class counts differing
/// by at most one between folds. Each class is shuffled, then dealt
/// round-robin; the dealing position carries over from one class to the
/// next so fold sizes also differ by at most one. Fold contents are sorted.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Argument(format!("k = {k}, at least 2 folds are required")));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Argument(format!("label {bad} is not 0 or 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in 0..=1u8 {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Stratification(format!(
                "class {class} has {} members, fewer than k = {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Shuffles labels across studies with a seeded permutation, keeping the
/// class counts. Used for null-signal runs.
pub fn permute_labels(labels: &[u8], seed: u64) -> Vec<u8> {
    let mut out = labels.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}
