use std::collections::HashSet;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Label, Labeled};
use crate::error::{Error, Result};

/// Drops majority-class trials, chosen uniformly under `seed`, until both
/// classes have the minority count. Surviving trials keep their order.
pub fn balance_undersample<T: Labeled + Clone>(trials: &[T], seed: u64) -> Result<Vec<T>> {
    let odor: Vec<usize> = (0..trials.len()).filter(|&i| trials[i].label() == Label::Odor).collect();
    let blank: Vec<usize> = (0..trials.len()).filter(|&i| trials[i].label() == Label::Blank).collect();
    if odor.is_empty() || blank.is_empty() {
        return Err(Error::invalid(format!(
            "balancing needs both classes, got {} odor / {} blank",
            odor.len(),
            blank.len()
        )));
    }
    if odor.len() == blank.len() {
        return Ok(trials.to_vec());
    }
    let (major, minor_len) = if odor.len() > blank.len() { (&odor, blank.len()) } else { (&blank, odor.len()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; trials.len()];
    for &i in major {
        keep[i] = false;
    }
    for j in sample(&mut rng, major.len(), minor_len) {
        keep[major[j]] = true;
    }
    Ok(trials.iter().zip(keep).filter(|(_, k)| *k).map(|(t, _)| t.clone()).collect())
}

/// Trial ids of one fold. `train`, `validation` and `test` are disjoint and
/// together cover the dataset; `validation` is carved out of the non-test part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub k: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Stratified k-fold plan. Each class is shuffled, the classes are laid end to
/// end and position `i` goes to test fold `i mod k`, so fold sizes differ by at
/// most one overall and per class. Within a fold, `val_fraction` of each
/// class's non-test trials (rounded half-up) become validation.
pub fn stratified_folds<T: Labeled>(trials: &[T], k: usize, val_fraction: f64, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = trials.iter().find(|t| !seen.insert(t.trial_id())) {
        return Err(Error::invalid(format!("duplicate trial id {}", dup.trial_id())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<u64>> = Vec::new();
    for label in [Label::Blank, Label::Odor] {
        let mut ids: Vec<u64> = trials.iter().filter(|t| t.label() == label).map(Labeled::trial_id).collect();
        if ids.len() < k {
            return Err(Error::invalid(format!("class {label} has {} trials, fewer than {k} folds", ids.len())));
        }
        ids.shuffle(&mut rng);
        by_class.push(ids);
    }

    let mut test_class: Vec<Vec<Vec<u64>>> = vec![vec![Vec::new(); 2]; k];
    for (pos, (class, id)) in by_class.iter().enumerate().flat_map(|(c, ids)| ids.iter().map(move |&id| (c, id))).enumerate() {
        test_class[pos % k][class].push(id);
    }

    let mut folds = Vec::with_capacity(k);
    for held_out in &test_class {
        let mut fold = Fold { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
        for class in 0..2 {
            let held: HashSet<u64> = held_out[class].iter().copied().collect();
            let mut rest: Vec<u64> = by_class[class].iter().copied().filter(|id| !held.contains(id)).collect();
            rest.shuffle(&mut rng);
            let n_val = round_half_up(val_fraction * rest.len() as f64).min(rest.len());
            fold.validation.extend_from_slice(&rest[..n_val]);
            fold.train.extend_from_slice(&rest[n_val..]);
            fold.test.extend_from_slice(&held_out[class]);
        }
        for ids in [&mut fold.train, &mut fold.validation, &mut fold.test] {
            ids.sort_unstable();
        }
        folds.push(fold);
    }
    Ok(FoldPlan { k, val_fraction, seed, folds })
}

impl FoldPlan {
    /// Checks the partition contract against the full id set.
    pub fn check_partition(&self, all_ids: &[u64]) -> Result<()> {
        let all: HashSet<u64> = all_ids.iter().copied().collect();
        let mut tested = HashSet::new();
        for (i, fold) in self.folds.iter().enumerate() {
            let train: HashSet<u64> = fold.train.iter().copied().collect();
            let val: HashSet<u64> = fold.validation.iter().copied().collect();
            for id in &fold.test {
                if train.contains(id) || val.contains(id) {
                    return Err(Error::Leakage(format!("fold {i}: test trial {id} also used for fitting")));
                }
                if !tested.insert(*id) {
                    return Err(Error::Leakage(format!("trial {id} is tested in more than one fold")));
                }
            }
            if let Some(id) = val.intersection(&train).next() {
                return Err(Error::Leakage(format!("fold {i}: trial {id} in both train and validation")));
            }
            if train.len() + val.len() + fold.test.len() != all.len() {
                return Err(Error::invalid(format!("fold {i} does not cover the dataset")));
            }
        }
        if tested != all {
            return Err(Error::invalid("test folds do not partition the dataset"));
        }
        Ok(())
    }

    pub fn test_sizes(&self) -> Vec<usize> {
        self.folds.iter().map(|f| f.test.len()).collect()
    }
}
