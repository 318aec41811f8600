use rand::seq::SliceRandom;

use super::{Cohort, Label};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// Subject-level split preserving class proportions.
///
/// Within each label, subjects are shuffled and `round(train_frac·n)` go to
/// train, keeping at least one subject on each side. A label with fewer than
/// two subjects cannot be stratified; its subjects go to train with a
/// warning. Both halves keep the input order.
pub fn split_stratified(cohort: &Cohort, train_frac: f64, seed: u64) -> Result<(Cohort, Cohort)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::contract(format!("train_frac {train_frac} must lie in (0, 1)")));
    }
    let mut rng = SeedStream::new(seed).stream("split");
    let mut in_train = vec![false; cohort.len()];
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..cohort.len())
            .filter(|&i| cohort.profiles[i].label == label)
            .collect();
        let n = idx.len();
        if n == 0 {
            continue;
        }
        if n < 2 {
            log::warn!("label {label} has {n} subject(s); assigning to train without stratification");
            idx.iter().for_each(|&i| in_train[i] = true);
            continue;
        }
        idx.shuffle(&mut rng);
        let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n - 1);
        idx[..n_train].iter().for_each(|&i| in_train[i] = true);
    }
    let pick = |flag: bool| Cohort {
        profiles: cohort
            .profiles
            .iter()
            .zip(&in_train)
            .filter(|(_, &t)| t == flag)
            .map(|(p, _)| p.clone())
            .collect(),
        feature_names: cohort.feature_names.clone(),
        provenance: cohort.provenance,
    };
    Ok((pick(true), pick(false)))
}
