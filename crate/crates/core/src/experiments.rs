//! Simulation studies: type-I error, power and robustness to non-Gaussian
//! noise, with CSV/JSON artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::{Detector, FilterSpec};
use crate::covariance::{sample_noise, CovarianceKind, CovarianceModel};
use crate::diffusion::{PlanSpec, ReconstructionPlan};
use crate::error::{Error, Result};
use crate::families::{FamilyKind, NonGaussianFamily};
use crate::inference::{analyze, SearchConfig, TestInstance, TestResult};
use crate::stats::clopper_pearson;
use crate::unet::{train, TrainConfig, TrainOutcome, UNetConfig, Weights};

pub const STREAM_DATA: u64 = 1;
pub const STREAM_PLAN: u64 = 2;
pub const STREAM_PATCH: u64 = 3;
pub const STREAM_PERMUTATION: u64 = 4;

/// Level of the Clopper–Pearson intervals in `summary.csv`.
pub const SUMMARY_CI_LEVEL: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub covariance: CovarianceKind,
    pub lambda: f64,
    pub filter: FilterSpec,
    /// Its seed is replaced per trial.
    pub plan: PlanSpec,
    pub alphas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub search: SearchConfig,
    /// Permutation count for the permutation baseline; `None` skips it.
    pub permutations: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 64,
            covariance: CovarianceKind::Identity,
            lambda: 0.8,
            filter: FilterSpec::default(),
            plan: PlanSpec::default(),
            alphas: vec![0.05, 0.10],
            trials: 500,
            seed: 0,
            search: SearchConfig::default(),
            permutations: None,
        }
    }
}

/// Training set and optimizer settings for a detector network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSpec {
    pub images: usize,
    pub data_seed: u64,
    pub train: TrainConfig,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            images: 1000,
            data_seed: 0x5eed,
            train: TrainConfig::default(),
        }
    }
}

/// Trains a network on normal images drawn with the study covariance.
pub fn train_null_model(cfg: &ExperimentConfig, spec: &TrainingSpec) -> Result<TrainOutcome> {
    let side = crate::anomaly::image_side(cfg.n)?;
    let cov = CovarianceModel::new(cfg.covariance, cfg.n);
    cov.validate()?;
    let data = sample_noise(&cov, spec.images, spec.data_seed)?;
    train(&data, UNetConfig::with_side(side), &cfg.plan.schedule()?, &spec.train)
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one random stream of one trial; independent of scheduling.
pub fn trial_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(master) ^ stream) ^ index)
}

/// Additive anomaly: `Δ` on a square patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub delta: f64,
    pub region: Vec<usize>,
}

impl SignalSpec {
    /// `⌈√(0.1·n)⌉`.
    pub fn patch_side(n: usize) -> usize {
        (0.1 * n as f64).sqrt().ceil() as usize
    }

    /// A patch at a uniformly drawn position.
    pub fn random(n: usize, delta: f64, rng: &mut impl Rng) -> Result<Self> {
        let side = crate::anomaly::image_side(n)?;
        let k = Self::patch_side(n).min(side);
        let top = rng.random_range(0..=side - k);
        let left = rng.random_range(0..=side - k);
        let region = (top..top + k)
            .flat_map(|r| (left..left + k).map(move |c| r * side + c))
            .collect();
        Ok(Self { delta, region })
    }

    pub fn apply(&self, x: &mut [f64]) {
        for &i in &self.region {
            x[i] += self.delta;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Noise {
    Gaussian(CovarianceModel),
    /// Independent pixels from a standardized family.
    Family(NonGaussianFamily),
}

impl Noise {
    /// The covariance the test assumes.
    pub fn covariance(&self, n: usize) -> CovarianceModel {
        match self {
            Self::Gaussian(cov) => *cov,
            Self::Family(_) => CovarianceModel::identity(n),
        }
    }

    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Self::Gaussian(cov) => cov.sample(rng),
            Self::Family(fam) => (0..n).map(|_| fam.sample(rng)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Selective,
    Oc,
    Naive,
    Bonferroni,
    Permutation,
}

impl Method {
    pub const ALL: [Self; 5] = [
        Self::Selective,
        Self::Oc,
        Self::Naive,
        Self::Bonferroni,
        Self::Permutation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Selective => "selective",
            Self::Oc => "oc",
            Self::Naive => "naive",
            Self::Bonferroni => "bonferroni",
            Self::Permutation => "permutation",
        }
    }
}

/// One completed trial, as written to `trials.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub group: String,
    pub setting: f64,
    pub trial: usize,
    pub plan_seed: u64,
    pub region_size: usize,
    pub z_obs: f64,
    pub sigma2: f64,
    pub p_selective: f64,
    pub p_oc: f64,
    pub p_naive: f64,
    pub p_bonferroni: f64,
    pub p_permutation: Option<f64>,
    pub intervals: usize,
    pub pieces: usize,
    pub degenerate: usize,
    /// Whether the detected region meets the planted patch; empty for null trials.
    pub overlap: Option<bool>,
}

impl TrialRecord {
    pub fn p_value(&self, method: Method) -> Option<f64> {
        match method {
            Method::Selective => Some(self.p_selective),
            Method::Oc => Some(self.p_oc),
            Method::Naive => Some(self.p_naive),
            Method::Bonferroni => Some(self.p_bonferroni),
            Method::Permutation => self.p_permutation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub message: String,
}

/// All trials of one (group, setting) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub group: String,
    pub setting: f64,
    pub requested: usize,
    pub records: Vec<TrialRecord>,
    pub excluded_empty: usize,
    pub failures: Vec<TrialFailure>,
}

impl Study {
    /// `(rejections, valid trials)` at level `alpha`; with `overlap_only`,
    /// only trials whose region meets the planted patch count.
    pub fn rejections(&self, method: Method, alpha: f64, overlap_only: bool) -> Option<(u64, u64)> {
        let mut k = 0;
        let mut total = 0;
        for rec in &self.records {
            if overlap_only && rec.overlap != Some(true) {
                continue;
            }
            let p = rec.p_value(method)?;
            total += 1;
            if p < alpha {
                k += 1;
            }
        }
        Some((k, total))
    }

    pub fn rate(&self, method: Method, alpha: f64, overlap_only: bool) -> Option<f64> {
        let (k, total) = self.rejections(method, alpha, overlap_only)?;
        (total > 0).then(|| k as f64 / total as f64)
    }

    pub fn p_values(&self, method: Method) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.p_value(method)).collect()
    }

    fn has_signal(&self) -> bool {
        self.records.iter().any(|r| r.overlap.is_some())
    }
}

enum Outcome {
    Done(Box<TestResult>, Option<bool>),
    Empty,
    Failed(String),
}

fn run_trial(cfg: &ExperimentConfig, weights: &Weights, noise: &Noise, delta: f64, index: usize) -> Outcome {
    let attempt = || -> Result<Option<(TestResult, Option<bool>)>> {
        let n = cfg.n;
        let idx = index as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, STREAM_DATA, idx));
        let mut x = noise.draw(n, &mut rng);
        let x_ref = noise.draw(n, &mut rng);
        let signal = if delta != 0.0 {
            let mut patch_rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, STREAM_PATCH, idx));
            let s = SignalSpec::random(n, delta, &mut patch_rng)?;
            s.apply(&mut x);
            Some(s)
        } else {
            None
        };
        let plan = ReconstructionPlan::new(cfg.plan.with_seed(trial_seed(cfg.seed, STREAM_PLAN, idx)), n)?;
        let detector = Detector::new(plan, weights, cfg.filter, cfg.lambda)?;
        let instance = TestInstance::new(x, x_ref, noise.covariance(n))?;
        let perms = cfg
            .permutations
            .map(|b| (b, trial_seed(cfg.seed, STREAM_PERMUTATION, idx)));
        match analyze(&instance, &detector, &cfg.search, perms) {
            Ok(res) => {
                let overlap = signal.map(|s| res.region.iter().any(|i| s.region.contains(i)));
                Ok(Some((res, overlap)))
            }
            Err(Error::EmptyRegion) => Ok(None),
            Err(e) => Err(e),
        }
    };
    match attempt() {
        Ok(Some((res, overlap))) => Outcome::Done(Box::new(res), overlap),
        Ok(None) => Outcome::Empty,
        Err(e) => Outcome::Failed(e.to_string()),
    }
}

/// Runs `cfg.trials` trials; trial `i` depends only on `(cfg.seed, i)`.
pub fn run_study(
    cfg: &ExperimentConfig,
    weights: &Weights,
    noise: &Noise,
    delta: f64,
    group: &str,
    setting: f64,
) -> Result<Study> {
    if weights.config.pixels() != cfg.n {
        return Err(Error::Shape {
            context: "network input vs study image size",
            expected: cfg.n,
            actual: weights.config.pixels(),
        });
    }
    let outcomes: Vec<Outcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| run_trial(cfg, weights, noise, delta, i))
        .collect();
    let mut study = Study {
        group: group.to_string(),
        setting,
        requested: cfg.trials,
        records: Vec::new(),
        excluded_empty: 0,
        failures: Vec::new(),
    };
    for (trial, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Outcome::Done(res, overlap) => study.records.push(TrialRecord {
                group: group.to_string(),
                setting,
                trial,
                plan_seed: res.plan_seed,
                region_size: res.region.len(),
                z_obs: res.z_obs,
                sigma2: res.sigma2,
                p_selective: res.p_selective,
                p_oc: res.p_oc,
                p_naive: res.p_naive,
                p_bonferroni: res.p_bonferroni,
                p_permutation: res.p_permutation,
                intervals: res.intervals.len(),
                pieces: res.pieces,
                degenerate: res.degenerate,
                overlap,
            }),
            Outcome::Empty => study.excluded_empty += 1,
            Outcome::Failed(message) => study.failures.push(TrialFailure { trial, message }),
        }
    }
    Ok(study)
}

/// Null images with the configured covariance.
pub fn run_type1(cfg: &ExperimentConfig, weights: &Weights) -> Result<Study> {
    let cov = CovarianceModel::new(cfg.covariance, cfg.n);
    cov.validate()?;
    run_study(
        cfg,
        weights,
        &Noise::Gaussian(cov),
        0.0,
        cfg.covariance.label(),
        cfg.n as f64,
    )
}

/// One study per signal strength, sharing trial seeds across strengths.
pub fn run_power(cfg: &ExperimentConfig, weights: &Weights, deltas: &[f64]) -> Result<Vec<Study>> {
    let cov = CovarianceModel::new(cfg.covariance, cfg.n);
    cov.validate()?;
    deltas
        .iter()
        .map(|&d| run_study(cfg, weights, &Noise::Gaussian(cov), d, cfg.covariance.label(), d))
        .collect()
}

/// Null studies under each calibrated family at each W₁ target.
pub fn run_robustness(
    cfg: &ExperimentConfig,
    weights: &Weights,
    families: &[FamilyKind],
    targets: &[f64],
) -> Result<Vec<Study>> {
    let mut out = Vec::new();
    for &family in families {
        for &d in targets {
            let fam = NonGaussianFamily::calibrated(family, d)?;
            out.push(run_study(cfg, weights, &Noise::Family(fam), 0.0, family.label(), d)?);
        }
    }
    Ok(out)
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub setting: f64,
    pub rejection_rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub alpha: f64,
    pub group: String,
    pub trials: u64,
    pub rejections: u64,
}

/// Rejection rates per method and level, sorted by group, method, level
/// and setting. Studies with a planted signal get
/// rows conditioned on overlap (group as is) and unconditional rows
/// (group suffixed `/unconditional`).
pub fn summarize(studies: &[Study], alphas: &[f64]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for study in studies {
        let variants: &[(bool, &str)] = if study.has_signal() {
            &[(true, ""), (false, "/unconditional")]
        } else {
            &[(false, "")]
        };
        for &(overlap_only, suffix) in variants {
            for method in Method::ALL {
                for &alpha in alphas {
                    let Some((k, total)) = study.rejections(method, alpha, overlap_only) else {
                        continue;
                    };
                    if total == 0 {
                        continue;
                    }
                    let (ci_lo, ci_hi) = clopper_pearson(k, total, SUMMARY_CI_LEVEL)?;
                    rows.push(SummaryRow {
                        method: method.label().to_string(),
                        setting: study.setting,
                        rejection_rate: k as f64 / total as f64,
                        ci_lo,
                        ci_hi,
                        alpha,
                        group: format!("{}{suffix}", study.group),
                        trials: total,
                        rejections: k,
                    });
                }
            }
        }
    }
    let order = |m: &str| Method::ALL.iter().position(|x| x.label() == m);
    rows.sort_by(|a, b| {
        a.group
            .cmp(&b.group)
            .then(order(&a.method).cmp(&order(&b.method)))
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.setting.total_cmp(&b.setting))
    });
    Ok(rows)
}

/// Writes `summary.csv`, `trials.csv` and `config.json` into `dir`.
///
/// `summary.csv` ends with one `#` comment line per study giving the
/// requested count and both exclusion counts.
pub fn write_artifacts(dir: &Path, config: &impl Serialize, studies: &[Study], alphas: &[f64]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let summary = summarize(studies, alphas)?;

    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for row in &summary {
            w.serialize(row).map_err(csv_error)?;
        }
        if summary.is_empty() {
            w.write_record([
                "method",
                "setting",
                "rejection_rate",
                "ci_lo",
                "ci_hi",
                "alpha",
                "group",
                "trials",
                "rejections",
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
    }
    for s in studies {
        writeln!(
            buf,
            "# group={} setting={} requested={} valid={} excluded_empty={} excluded_error={}",
            s.group,
            s.setting,
            s.requested,
            s.records.len(),
            s.excluded_empty,
            s.failures.len()
        )?;
    }
    fs::write(dir.join("summary.csv"), buf)?;

    let mut w = csv::Writer::from_path(dir.join("trials.csv")).map_err(csv_error)?;
    let mut wrote = false;
    for rec in studies.iter().flat_map(|s| &s.records) {
        w.serialize(rec).map_err(csv_error)?;
        wrote = true;
    }
    if !wrote {
        w.write_record(TRIAL_COLUMNS).map_err(csv_error)?;
    }
    w.flush()?;

    fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    Ok(())
}

const TRIAL_COLUMNS: [&str; 16] = [
    "group",
    "setting",
    "trial",
    "plan_seed",
    "region_size",
    "z_obs",
    "sigma2",
    "p_selective",
    "p_oc",
    "p_naive",
    "p_bonferroni",
    "p_permutation",
    "intervals",
    "pieces",
    "degenerate",
    "overlap",
];

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
