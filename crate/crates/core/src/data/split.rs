use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::SeededRng;

/// `fold[i]` is the held-out fold of sample `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold: Vec<usize>,
}

impl FoldAssignment {
    pub fn held_out(&self, f: usize) -> Vec<usize> {
        (0..self.fold.len()).filter(|&i| self.fold[i] == f).collect()
    }

    pub fn training(&self, f: usize) -> Vec<usize> {
        (0..self.fold.len()).filter(|&i| self.fold[i] != f).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold {
            s[f] += 1;
        }
        s
    }
}

/// Seeded shuffle, then fold `j mod k` for the `j`-th shuffled sample.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(Error::Contract(format!("k-fold needs 2 ≤ k ≤ N, got k={k}, N={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeededRng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (j, &i) in order.iter().enumerate() {
        fold[i] = j % k;
    }
    Ok(FoldAssignment { k, fold })
}

/// Seeded shuffle into `(train, held_out)` with `round(n · held_out_fraction)`
/// held out, at least one sample on each side.
pub fn ratio_split(n: usize, held_out_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(held_out_fraction > 0.0 && held_out_fraction < 1.0) {
        return Err(Error::Config(format!("held-out fraction {held_out_fraction} not in (0, 1)")));
    }
    if n < 2 {
        return Err(Error::Contract(format!("ratio split needs at least 2 samples, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeededRng::seed_from_u64(seed));
    let held = ((n as f64 * held_out_fraction).round() as usize).clamp(1, n - 1);
    let train = order.split_off(held);
    Ok((train, order))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_and_uneven_sizes() {
        assert_eq!(kfold_split(10, 5, 1).unwrap().sizes(), vec![2; 5]);
        let mut s = kfold_split(11, 5, 1).unwrap().sizes();
        s.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(s, vec![3, 2, 2, 2, 2]);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(kfold_split(50, 5, 7).unwrap(), kfold_split(50, 5, 7).unwrap());
        assert_ne!(kfold_split(50, 5, 7).unwrap(), kfold_split(50, 5, 8).unwrap());
    }

    #[test]
    fn k_larger_than_n_is_rejected() {
        assert!(matches!(kfold_split(3, 4, 0), Err(Error::Contract(_))));
        assert!(matches!(kfold_split(3, 1, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn ratio_split_partitions() {
        let (train, held) = ratio_split(10, 0.2, 3).unwrap();
        assert_eq!((train.len(), held.len()), (8, 2));
        let mut all: Vec<_> = train.iter().chain(&held).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
