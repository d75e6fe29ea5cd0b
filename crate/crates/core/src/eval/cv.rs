use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{classification_metrics, ClassificationMetrics};
use super::{EvalError, Result};
use crate::mil::{predict, train, MilModel, Prediction, TrainConfig, TrainLog};
use crate::rng::{derive_seed, stream};
use crate::store::FeatureBag;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    /// Fold index holding each sample in its test set.
    pub fn assignment(&self, n: usize) -> Vec<usize> {
        let mut a = vec![usize::MAX; n];
        for (f, fold) in self.folds.iter().enumerate() {
            for &i in &fold.test {
                a[i] = f;
            }
        }
        a
    }
}

const SPLIT_SALT: u64 = 0x5350_4c49_54;

/// Stratified k-fold: each class is shuffled and dealt round-robin, the deal
/// continuing from where the previous class stopped so fold sizes stay even.
pub fn stratified_splits(labels: &[u8], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(EvalError::InvalidInput("need at least 2 folds".into()));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = stream(derive_seed(seed, SPLIT_SALT), 0);
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut offset = 0;
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < k {
            return Err(EvalError::ClassTooSmall { class: c, size: members.len(), k });
        }
        members.shuffle(&mut rng);
        for (i, m) in members.iter().enumerate() {
            tests[(offset + i) % k].push(*m);
        }
        offset = (offset + members.len()) % k;
    }
    let folds = tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..labels.len()).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect();
    Ok(SplitPlan { k, seed, folds })
}

#[derive(Debug, Clone)]
pub struct CohortResult {
    /// One held-out prediction per sample, in cohort order.
    pub predictions: Vec<Prediction>,
    pub fold_of: Vec<usize>,
    pub metrics: ClassificationMetrics,
    pub models: Vec<MilModel>,
    pub logs: Vec<TrainLog>,
}

impl CohortResult {
    pub fn probabilities(&self) -> Vec<f64> {
        self.predictions.iter().map(|p| p.p).collect()
    }

    /// Model that produced the held-out prediction of sample `i`.
    pub fn model_for(&self, i: usize) -> &MilModel {
        &self.models[self.fold_of[i]]
    }
}

/// Train one model per fold, predict its test samples, pool the predictions.
/// Fold `f` trains with seed `derive_seed(cfg.seed, f)`.
pub fn cross_validate(bags: &[FeatureBag], labels: &[u8], cfg: &TrainConfig, plan: &SplitPlan) -> Result<CohortResult> {
    if bags.len() != labels.len() {
        return Err(EvalError::LengthMismatch(bags.len(), labels.len()));
    }
    let fold_of = plan.assignment(bags.len());
    if fold_of.contains(&usize::MAX) {
        return Err(EvalError::InvalidInput("split plan does not cover the cohort".into()));
    }
    let trained: Vec<(MilModel, TrainLog, Vec<(usize, Prediction)>)> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(f, fold)| {
            let train_bags: Vec<FeatureBag> = fold.train.iter().map(|&i| bags[i].clone()).collect();
            let train_labels: Vec<u8> = fold.train.iter().map(|&i| labels[i]).collect();
            let fold_cfg = TrainConfig { seed: derive_seed(cfg.seed, f as u64), ..cfg.clone() };
            let (model, _, log) = train(&train_bags, &train_labels, &fold_cfg)?;
            let preds = fold
                .test
                .iter()
                .map(|&i| Ok((i, predict(&model, &bags[i])?)))
                .collect::<Result<Vec<_>>>()?;
            Ok((model, log, preds))
        })
        .collect::<Result<_>>()?;
    let mut slots: Vec<Option<Prediction>> = vec![None; bags.len()];
    let mut models = Vec::with_capacity(trained.len());
    let mut logs = Vec::with_capacity(trained.len());
    for (model, log, preds) in trained {
        for (i, p) in preds {
            slots[i] = Some(p);
        }
        models.push(model);
        logs.push(log);
    }
    let predictions: Vec<Prediction> = slots.into_iter().map(|p| p.expect("every sample tested once")).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.p).collect();
    let metrics = classification_metrics(&scores, labels, 0.5)?;
    Ok(CohortResult { predictions, fold_of, metrics, models, logs })
}

/// Apply every fold model to another cohort and average the probabilities.
pub fn cross_cohort_predict(models: &[MilModel], bags: &[FeatureBag]) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(EvalError::InvalidInput("no models".into()));
    }
    bags.par_iter()
        .map(|b| {
            let mut total = 0.0;
            for m in models {
                total += predict(m, b)?.p;
            }
            Ok(total / models.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_cohort_splits_evenly() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 2) as u8).collect();
        let plan = stratified_splits(&labels, 5, 1).unwrap();
        let mut all: Vec<usize> = Vec::new();
        for f in &plan.folds {
            let pos = f.test.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!((pos, f.test.len() - pos), (5, 5));
            assert!(f.train.iter().all(|i| !f.test.contains(i)));
            all.extend(&f.test);
        }
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn uneven_cohort_within_one_of_ratio() {
        let labels: Vec<u8> = (0..45).map(|i| (i >= 23) as u8).collect();
        let plan = stratified_splits(&labels, 5, 3).unwrap();
        for f in &plan.folds {
            let ones = f.test.iter().filter(|&&i| labels[i] == 1).count() as f64;
            let zeros = f.test.len() as f64 - ones;
            assert!((zeros - 4.6).abs() <= 1.0 && (ones - 4.4).abs() <= 1.0, "{zeros} {ones}");
        }
        assert_eq!(plan, stratified_splits(&labels, 5, 3).unwrap());
    }

    #[test]
    fn small_class_rejected() {
        assert!(matches!(stratified_splits(&[0, 0, 0, 1, 1], 3, 0), Err(EvalError::ClassTooSmall { .. })));
    }
}
