//! Cross-validation, classification metrics, survival and association
//! statistics, and the partial-volume and plane-variability experiments.

mod cv;
mod experiments;
mod metrics;
mod survival;

pub use cv::{cross_cohort_predict, cross_validate, stratified_splits, CohortResult, Fold, SplitPlan};
pub use experiments::{
    partial_volume_experiment, per_plane_predictions, plane_variability, PartialVolumeResult, PlaneVariability,
    RankShiftRow,
};
pub use metrics::{
    auc, average_ranks, classification_metrics, mean_sd, median, pearson, quantile_sorted, spearman, t_test,
    welch_t, ClassificationMetrics, Correlation, TTest,
};
pub use survival::{kaplan_meier, log_rank, survival_analysis, survival_by_groups, KmCurve, LogRank, SurvivalResult};

use crate::interpret::InterpretError;
use crate::mil::MilError;
use crate::store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("AUC is undefined when only one class is present")]
    SingleClass,
    #[error("non-finite score")]
    NonFinite,
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("zero variance input")]
    ZeroVariance,
    #[error("a comparison group is empty")]
    EmptyGroup,
    #[error("class {class} has {size} members, fewer than {k} folds")]
    ClassTooSmall { class: u8, size: usize, k: usize },
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] MilError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, EvalError>;
