use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetIndex;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Fraction of the non-test records held out for validation inside each fold.
pub const KFOLD_VAL_FRACTION: f64 = 0.18;

/// Record ids (positions in a [`DatasetIndex`]) for each partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Whether records of one subject may land in different partitions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    Record,
    Subject,
}

/// Shuffled units; each unit is the list of record ids it covers.
fn shuffled_units(index: &DatasetIndex, grouping: Grouping, seed: u64) -> Vec<Vec<usize>> {
    let mut units: Vec<Vec<usize>> = match grouping {
        Grouping::Record => (0..index.len()).map(|i| vec![i]).collect(),
        Grouping::Subject => {
            let mut order: Vec<&str> = Vec::new();
            let mut groups: Vec<Vec<usize>> = Vec::new();
            for (i, r) in index.records().iter().enumerate() {
                match order.iter().position(|s| *s == r.subject_id) {
                    Some(p) => groups[p].push(i),
                    None => {
                        order.push(&r.subject_id);
                        groups.push(vec![i]);
                    }
                }
            }
            groups
        }
    };
    units.shuffle(&mut rng_from(seed));
    units
}

pub fn make_splits(index: &DatasetIndex, ratios: (f64, f64, f64), seed: u64) -> Result<SplitSpec> {
    make_splits_with(index, ratios, seed, Grouping::Record)
}

/// Seeded train/val/test partition; test and val sizes are floored, train
/// takes the remainder.
pub fn make_splits_with(
    index: &DatasetIndex,
    ratios: (f64, f64, f64),
    seed: u64,
    grouping: Grouping,
) -> Result<SplitSpec> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Range(format!(
            "split ratios must be positive and sum to 1, got ({tr}, {va}, {te})"
        )));
    }
    if index.len() < 3 {
        return Err(Error::Size(format!("need at least 3 records, have {}", index.len())));
    }
    let units = shuffled_units(index, grouping, seed);
    let n = units.len();
    let n_test = (te * n as f64).floor() as usize;
    let n_val = (va * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    if n_test == 0 || n_val == 0 || n_train == 0 {
        return Err(Error::Size(format!(
            "{n} units too few for non-empty splits at ratios ({tr}, {va}, {te})"
        )));
    }
    let flat = |s: &[Vec<usize>]| s.iter().flatten().copied().collect::<Vec<_>>();
    Ok(SplitSpec {
        train: flat(&units[..n_train]),
        val: flat(&units[n_train..n_train + n_val]),
        test: flat(&units[n_train + n_val..]),
        seed,
    })
}

pub fn make_kfold(index: &DatasetIndex, k: usize, seed: u64) -> Result<Vec<SplitSpec>> {
    make_kfold_with(index, k, seed, Grouping::Record)
}

/// `k` folds whose test sets partition the index; the first `N mod k` folds
/// get one extra unit. Remaining units split 82/18 into train/val.
pub fn make_kfold_with(
    index: &DatasetIndex,
    k: usize,
    seed: u64,
    grouping: Grouping,
) -> Result<Vec<SplitSpec>> {
    if k < 2 {
        return Err(Error::Range(format!("k-fold needs k >= 2, got {k}")));
    }
    let units = shuffled_units(index, grouping, seed);
    let n = units.len();
    if k > n {
        return Err(Error::Size(format!("k = {k} exceeds {n} units")));
    }
    let (base, extra) = (n / k, n % k);
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for f in 0..k {
        bounds.push(bounds[f] + base + usize::from(f < extra));
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test: Vec<usize> = units[bounds[f]..bounds[f + 1]].iter().flatten().copied().collect();
        let mut rest: Vec<&Vec<usize>> = units[..bounds[f]]
            .iter()
            .chain(&units[bounds[f + 1]..])
            .collect();
        rest.shuffle(&mut rng_from(derive_seed(seed, f as u64)));
        let n_val = (KFOLD_VAL_FRACTION * rest.len() as f64).floor() as usize;
        let n_train = rest.len() - n_val;
        folds.push(SplitSpec {
            train: rest[..n_train].iter().copied().flatten().copied().collect(),
            val: rest[n_train..].iter().copied().flatten().copied().collect(),
            test,
            seed,
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::record::ScanRecord;
    use proptest::prelude::*;

    fn index(n: usize) -> DatasetIndex {
        DatasetIndex::new(
            (0..n)
                .map(|i| ScanRecord::unlabeled(format!("{i}.nii"), format!("s{}", i / 2), i as u32))
                .collect(),
        )
        .unwrap()
    }

    fn assert_partition(s: &SplitSpec, n: usize) {
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn split_sizes() {
        let s = make_splits(&index(100), (0.70, 0.15, 0.15), 1).unwrap();
        assert_eq!(s.sizes(), (70, 15, 15));
        let s = make_splits(&index(10), (0.70, 0.15, 0.15), 1).unwrap();
        assert_eq!(s.sizes(), (8, 1, 1));
        assert_eq!(s, make_splits(&index(10), (0.70, 0.15, 0.15), 1).unwrap());
        assert_ne!(s, make_splits(&index(10), (0.70, 0.15, 0.15), 2).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(make_splits(&index(2), (0.7, 0.15, 0.15), 0), Err(Error::Size(_))));
        assert!(matches!(make_splits(&index(5), (0.7, 0.15, 0.15), 0), Err(Error::Size(_))));
        assert!(matches!(make_splits(&index(50), (0.7, 0.2, 0.2), 0), Err(Error::Range(_))));
        assert!(matches!(make_splits(&index(50), (1.0, 0.0, 0.0), 0), Err(Error::Range(_))));
    }

    #[test]
    fn subject_grouping_keeps_subjects_together() {
        let idx = index(40);
        let s = make_splits_with(&idx, (0.7, 0.15, 0.15), 3, Grouping::Subject).unwrap();
        assert_partition(&s, 40);
        let subj = |ids: &[usize]| -> std::collections::HashSet<String> {
            ids.iter().map(|&i| idx.records()[i].subject_id.clone()).collect()
        };
        assert!(subj(&s.train).is_disjoint(&subj(&s.test)));
        assert!(subj(&s.train).is_disjoint(&subj(&s.val)));
        assert_eq!(s.sizes(), (28, 6, 6));
    }

    #[test]
    fn kfold_sizes() {
        let f = make_kfold(&index(9), 3, 0).unwrap();
        assert_eq!(f.iter().map(|s| s.test.len()).collect::<Vec<_>>(), vec![3, 3, 3]);
        let f = make_kfold(&index(10), 3, 0).unwrap();
        assert_eq!(f.iter().map(|s| s.test.len()).collect::<Vec<_>>(), vec![4, 3, 3]);
        for s in &f {
            assert_partition(s, 10);
        }
        assert_eq!(f, make_kfold(&index(10), 3, 0).unwrap());
        assert!(matches!(make_kfold(&index(2), 3, 0), Err(Error::Size(_))));
        assert!(make_kfold(&index(5), 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition(n in 7usize..200, seed in any::<u64>()) {
            let s = make_splits(&index(n), (0.7, 0.15, 0.15), seed).unwrap();
            assert_partition(&s, n);
        }

        #[test]
        fn kfold_tests_partition(n in 2usize..60, kk in 2usize..60, seed in any::<u64>()) {
            let k = kk.min(n);
            let folds = make_kfold(&index(n), k, seed).unwrap();
            prop_assert_eq!(folds.len(), k);
            let mut tests: Vec<usize> = folds.iter().flat_map(|s| s.test.clone()).collect();
            tests.sort_unstable();
            prop_assert_eq!(tests, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = folds.iter().map(|s| s.test.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for s in &folds {
                assert_partition(s, n);
            }
        }
    }
}
