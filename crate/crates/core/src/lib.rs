//! Anomaly localization with a piecewise-linear diffusion model and exact
//! selective p-values for the localized region.
//!
//! The detector maps an image `x` to the region `{i : |F(x − D(x))|_i ≥ λ}`,
//! where `D` is a few reverse-diffusion steps of a ReLU U-Net with frozen
//! noise and `F` is an averaging filter. Every stage is piecewise linear in
//! `x`, so along any line `a + b·z` the set of `z` reproducing the observed
//! region is a finite union of intervals. [`inference`] finds that union and
//! integrates a truncated Gaussian over it.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomaly;
pub mod covariance;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod families;
pub mod inference;
pub mod normal;
pub mod propagate;
pub mod pwl;
pub mod stats;
pub mod unet;

pub use anomaly::{detect_region, error_map, AnomalyRegion, Detector, FilterSpec};
pub use covariance::{sample_noise, CovarianceKind, CovarianceModel};
pub use diffusion::{reconstruct, NoiseSchedule, PlanSpec, ReconstructionPlan};
pub use error::{Error, Result};
pub use experiments::{
    run_power, run_robustness, run_type1, summarize, train_null_model, write_artifacts, ExperimentConfig, Method,
    Study, TrainingSpec,
};
pub use families::{calibrate_family, wasserstein1_to_std_normal, FamilyKind, NonGaussianFamily};
pub use inference::{
    analyze, bonferroni_p, decompose, grid_audit, naive_p, oc_p, parametric_search, permutation_p, selective_p,
    test_statistic, Decomposition, GridAudit, SearchConfig, SearchOutcome, TestInstance, TestResult, TruncatedGaussian,
};
pub use pwl::{AffineVector, FixedInterval, IntervalSet};
pub use unet::{UNetConfig, Weights};
