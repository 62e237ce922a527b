//! Hypothesis test on a detected region: statistic, nuisance decomposition,
//! the line search for the truncation set, and the p-values.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::{AnomalyRegion, Detector};
use crate::covariance::CovarianceModel;
use crate::error::{Error, Result};
use crate::normal::{log_interval_mass, log_sf, log_sum_exp};
use crate::pwl::{check_len, intervals_union, AffineVector, FixedInterval, IntervalSet};

/// Below this log-mass the truncation set is treated as numerically empty.
pub const LOG_MASS_FLOOR: f64 = -5000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestInstance {
    pub x: Vec<f64>,
    pub x_ref: Vec<f64>,
    pub covariance: CovarianceModel,
}

impl TestInstance {
    pub fn new(x: Vec<f64>, x_ref: Vec<f64>, covariance: CovarianceModel) -> Result<Self> {
        check_len("reference image", x.len(), x_ref.len())?;
        check_len("covariance dimension", x.len(), covariance.n)?;
        covariance.validate()?;
        Ok(Self { x, x_ref, covariance })
    }

    pub fn pixels(&self) -> usize {
        self.x.len()
    }

    /// `(x; x_ref)`.
    pub fn stacked(&self) -> Vec<f64> {
        let mut out = self.x.clone();
        out.extend_from_slice(&self.x_ref);
        out
    }
}

fn mean_over(values: &[f64], pixels: &[usize]) -> f64 {
    pixels.iter().map(|&i| values[i]).sum::<f64>() / pixels.len() as f64
}

fn check_region(region: &AnomalyRegion, n: usize) -> Result<()> {
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    match region.pixels().iter().find(|&&i| i >= n) {
        Some(&i) => Err(Error::InvalidArgument(format!(
            "region pixel {i} outside image of {n} pixels"
        ))),
        None => Ok(()),
    }
}

/// Mean of `x` over the region minus mean of `x_ref` over the region.
pub fn test_statistic(instance: &TestInstance, region: &AnomalyRegion) -> Result<f64> {
    check_region(region, instance.pixels())?;
    Ok(mean_over(&instance.x, region.pixels()) - mean_over(&instance.x_ref, region.pixels()))
}

/// `ν = (1_M; −1_M)/|M|`.
pub fn contrast(region: &AnomalyRegion, n: usize) -> Result<Vec<f64>> {
    check_region(region, n)?;
    let w = 1.0 / region.len() as f64;
    let mut nu = vec![0.0; 2 * n];
    for &i in region.pixels() {
        nu[i] = w;
        nu[n + i] = -w;
    }
    Ok(nu)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The data restricted to the line `a + b·z`, with `z = νᵀ(x; x_ref)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub nu: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma2: f64,
    pub z_obs: f64,
}

impl Decomposition {
    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    pub fn line(&self) -> AffineVector {
        AffineVector::new(self.a.clone(), self.b.clone()).expect("a and b share a length")
    }
}

pub fn decompose(instance: &TestInstance, region: &AnomalyRegion) -> Result<Decomposition> {
    let n = instance.pixels();
    let nu = contrast(region, n)?;
    let mut sigma_nu = instance.covariance.matvec(&nu[..n])?;
    sigma_nu.extend(instance.covariance.matvec(&nu[n..])?);
    let sigma2 = dot(&nu, &sigma_nu);
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Covariance(format!("contrast variance {sigma2} is not positive")));
    }
    let stacked = instance.stacked();
    let z_obs = dot(&nu, &stacked);
    let b: Vec<f64> = sigma_nu.iter().map(|v| v / sigma2).collect();
    let a = stacked.iter().zip(&b).map(|(x, bi)| x - bi * z_obs).collect();
    Ok(Decomposition {
        nu,
        a,
        b,
        sigma2,
        z_obs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussian {
    pub variance: f64,
    pub truncation: IntervalSet,
}

impl TruncatedGaussian {
    pub fn new(variance: f64, truncation: IntervalSet) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument(format!("variance {variance} must be positive")));
        }
        Ok(Self { variance, truncation })
    }

    fn log_mass_where(&self, keep: impl Fn(&FixedInterval) -> Option<FixedInterval>) -> f64 {
        let sigma = self.variance.sqrt();
        log_sum_exp(
            self.truncation
                .intervals()
                .iter()
                .filter_map(keep)
                .map(|iv| log_interval_mass(iv.lo / sigma, iv.hi / sigma)),
        )
    }

    /// `ln` of the Gaussian mass of the truncation set.
    pub fn log_mass(&self) -> f64 {
        self.log_mass_where(|iv| Some(*iv))
    }
}

/// `P(|Z| ≥ |z_obs| | Z ∈ truncation)` for `Z ~ N(0, σ²)`.
pub fn selective_p(z_obs: f64, tg: &TruncatedGaussian) -> Result<f64> {
    let log_total = tg.log_mass();
    if !(log_total > LOG_MASS_FLOOR) {
        return Err(Error::MassUnderflow { log_mass: log_total });
    }
    let r = z_obs.abs();
    let lower = FixedInterval::new(f64::NEG_INFINITY, -r);
    let upper = FixedInterval::new(r, f64::INFINITY);
    let sigma = tg.variance.sqrt();
    let log_tail = log_sum_exp(tg.truncation.intervals().iter().flat_map(|iv| {
        [iv.intersect(&lower), iv.intersect(&upper)]
            .into_iter()
            .flatten()
            .map(|part| log_interval_mass(part.lo / sigma, part.hi / sigma))
    }));
    Ok((log_tail - log_total).exp().clamp(0.0, 1.0))
}

/// `2·Φ̄(|z_obs|/σ)`.
pub fn naive_p(z_obs: f64, sigma2: f64) -> f64 {
    (std::f64::consts::LN_2 + log_sf(z_obs.abs() / sigma2.sqrt()))
        .exp()
        .min(1.0)
}

/// `min(1, 2ⁿ·p)` evaluated as `n·ln 2 + ln p`.
pub fn bonferroni_p(naive: f64, n: usize) -> f64 {
    if naive <= 0.0 {
        return 0.0;
    }
    let log_p = n as f64 * std::f64::consts::LN_2 + naive.ln();
    if log_p >= 0.0 {
        1.0
    } else {
        log_p.exp()
    }
}

/// Selective p-value conditioned only on the interval around the observation.
pub fn oc_p(z_obs: f64, sigma2: f64, zsub: FixedInterval) -> Result<f64> {
    selective_p(
        z_obs,
        &TruncatedGaussian::new(sigma2, IntervalSet::from_parts([zsub], 0.0))?,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Half-width of the scanned range in units of σ.
    pub range_sigmas: f64,
    /// Step past each interval end, in units of σ.
    pub gamma_sigmas: f64,
    pub max_steps: usize,
    /// When set, the half-width shrinks below `range_sigmas` to the smallest
    /// `R` whose two-sided Gaussian tail beyond `±Rσ` is at most this fraction
    /// of the mass of the interval around `z_obs`. Parts of the truncation set
    /// beyond the range can then move the p-value by at most this amount.
    pub tail_tolerance: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            range_sigmas: 20.0,
            gamma_sigmas: 1e-4,
            max_steps: 1_000_000,
            tail_tolerance: None,
        }
    }
}

impl SearchConfig {
    pub fn range(&self, z_obs: f64, sigma: f64) -> FixedInterval {
        self.range_with_half_width(self.range_sigmas, z_obs, sigma)
    }

    fn range_with_half_width(&self, half_width: f64, z_obs: f64, sigma: f64) -> FixedInterval {
        FixedInterval::new(
            (-half_width * sigma).min(z_obs - sigma),
            (half_width * sigma).max(z_obs + sigma),
        )
    }

    /// The scanned range given the interval `zsub` around `z_obs`.
    pub fn adaptive_range(&self, z_obs: f64, sigma: f64, zsub: FixedInterval) -> FixedInterval {
        let Some(tol) = self.tail_tolerance else {
            return self.range(z_obs, sigma);
        };
        let log_budget = tol.ln() + log_interval_mass(zsub.lo / sigma, zsub.hi / sigma);
        let tail = |r: f64| std::f64::consts::LN_2 + log_sf(r);
        if !(tail(self.range_sigmas) <= log_budget) {
            return self.range(z_obs, sigma);
        }
        let (mut lo, mut hi) = (0.0, self.range_sigmas);
        while hi - lo > 1e-3 {
            let mid = 0.5 * (lo + hi);
            if tail(mid) <= log_budget {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        self.range_with_half_width(hi, z_obs, sigma)
    }

    pub fn gamma(&self, sigma: f64) -> f64 {
        self.gamma_sigmas * sigma
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub truncation: IntervalSet,
    pub range: FixedInterval,
    /// Number of anchors visited.
    pub pieces: usize,
    /// Zero-width pieces skipped.
    pub degenerate: usize,
}

/// Walks `range` left to right. `probe(z)` returns the region at `z` and an
/// interval containing `z` on which that region is constant.
pub fn scan_line(
    observed: &AnomalyRegion,
    range: FixedInterval,
    gamma: f64,
    max_steps: usize,
    mut probe: impl FnMut(f64) -> Result<(AnomalyRegion, FixedInterval)>,
) -> Result<SearchOutcome> {
    if !(gamma > 0.0) || !range.lo.is_finite() || !range.hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bad search range {range} or step {gamma}"
        )));
    }
    let mut parts = Vec::new();
    let mut z = range.lo;
    let mut pieces = 0;
    let mut degenerate = 0;
    while z <= range.hi {
        if pieces == max_steps {
            return Err(Error::StepBudget {
                steps: max_steps,
                start: range.lo,
                reached: z,
                end: range.hi,
            });
        }
        pieces += 1;
        let (region, interval) = probe(z)?;
        if !interval.contains(z) {
            return Err(Error::Consistency(format!("interval {interval} misses its anchor {z}")));
        }
        if interval.is_degenerate() {
            degenerate += 1;
        } else if region.same_pixels(observed) {
            if let Some(clipped) = interval.intersect(&range) {
                parts.push(clipped);
            }
        }
        z = interval.hi + gamma;
    }
    Ok(SearchOutcome {
        truncation: intervals_union(parts),
        range,
        pieces,
        degenerate,
    })
}

/// The truncation set for `observed` along the line of `decomposition`.
pub fn parametric_search(
    detector: &Detector<'_>,
    decomposition: &Decomposition,
    observed: &AnomalyRegion,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    let sigma = decomposition.sigma();
    let n = detector.pixels();
    check_len("decomposition", 2 * n, decomposition.a.len())?;
    let line = decomposition.line().slice(0, n);
    let gamma = cfg.gamma(sigma);
    let range = match cfg.tail_tolerance {
        Some(_) => {
            let (at_obs, zsub) = detector.region_and_interval(&line, decomposition.z_obs)?;
            if !at_obs.same_pixels(observed) {
                return Err(Error::Consistency(
                    "line pipeline disagrees with the observed region at z_obs".into(),
                ));
            }
            cfg.adaptive_range(decomposition.z_obs, sigma, zsub)
        }
        None => cfg.range(decomposition.z_obs, sigma),
    };
    let outcome = scan_line(observed, range, gamma, cfg.max_steps, |z| {
        detector.region_and_interval(&line, z)
    })?;
    let z_obs = decomposition.z_obs;
    if !outcome.truncation.contains(z_obs) && outcome.truncation.distance_to_boundary(z_obs) > 2.0 * gamma {
        return Err(Error::Consistency(format!(
            "observed statistic {z_obs} lies outside the truncation set"
        )));
    }
    Ok(outcome)
}

/// Grid-vs-search comparison of a truncation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAudit {
    pub points: usize,
    pub agreements: usize,
    /// Grid points where direct detection and the truncation set disagree,
    /// with their distance to the nearest endpoint of the set.
    pub disagreements: Vec<(f64, f64)>,
    pub z_obs_in_truncation: bool,
}

impl GridAudit {
    pub fn agreement(&self) -> f64 {
        if self.points == 0 {
            1.0
        } else {
            self.agreements as f64 / self.points as f64
        }
    }

    pub fn max_disagreement_distance(&self) -> f64 {
        self.disagreements.iter().map(|d| d.1).fold(0.0, f64::max)
    }
}

/// Runs the concrete detector at every `step` across `outcome.range` and
/// compares region equality with membership in `outcome.truncation`.
pub fn grid_audit(
    detector: &Detector<'_>,
    decomposition: &Decomposition,
    observed: &AnomalyRegion,
    outcome: &SearchOutcome,
    step: f64,
) -> Result<GridAudit> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("grid step {step} must be positive")));
    }
    let n = detector.pixels();
    let line = decomposition.line().slice(0, n);
    let range = outcome.range;
    let count = ((range.hi - range.lo) / step).floor() as usize + 1;
    let verdicts: Vec<(f64, bool)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let z = range.lo + i as f64 * step;
            let region = detector.detect(&line.eval(z))?;
            Ok((z, region.same_pixels(observed) == outcome.truncation.contains(z)))
        })
        .collect::<Result<_>>()?;
    let disagreements: Vec<(f64, f64)> = verdicts
        .iter()
        .filter(|v| !v.1)
        .map(|&(z, _)| (z, outcome.truncation.distance_to_boundary(z)))
        .collect();
    Ok(GridAudit {
        points: count,
        agreements: count - disagreements.len(),
        disagreements,
        z_obs_in_truncation: outcome.truncation.contains(decomposition.z_obs),
    })
}

/// Fraction of permuted test images whose statistic strictly exceeds `|z_obs|`.
/// A permutation with an empty region counts as `|z| = 0`.
pub fn permutation_p_with(
    instance: &TestInstance,
    detector: &Detector<'_>,
    z_obs: f64,
    permutations: &[Vec<usize>],
) -> Result<f64> {
    if permutations.is_empty() {
        return Err(Error::InvalidArgument("at least one permutation is required".into()));
    }
    let n = instance.pixels();
    let exceed = permutations
        .par_iter()
        .map(|perm| -> Result<bool> {
            check_len("permutation", n, perm.len())?;
            let permuted: Vec<f64> = perm.iter().map(|&i| instance.x[i]).collect();
            let region = detector.detect(&permuted)?;
            if region.is_empty() {
                return Ok(false);
            }
            let z = mean_over(&permuted, region.pixels()) - mean_over(&instance.x_ref, region.pixels());
            Ok(z.abs() > z_obs.abs())
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(exceed.iter().filter(|&&e| e).count() as f64 / permutations.len() as f64)
}

pub fn permutation_p(instance: &TestInstance, detector: &Detector<'_>, count: usize, seed: u64) -> Result<f64> {
    let region = detector.detect(&instance.x)?;
    let z_obs = test_statistic(instance, &region)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..count)
        .map(|_| {
            let mut p: Vec<usize> = (0..instance.pixels()).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    permutation_p_with(instance, detector, z_obs, &perms)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub detect_ms: f64,
    pub search_ms: f64,
    pub permutation_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub region: Vec<usize>,
    pub z_obs: f64,
    pub sigma2: f64,
    pub intervals: Vec<FixedInterval>,
    pub zsub: FixedInterval,
    pub p_selective: f64,
    pub p_naive: f64,
    pub p_bonferroni: f64,
    pub p_oc: f64,
    pub p_permutation: Option<f64>,
    pub plan_seed: u64,
    pub pieces: usize,
    pub degenerate: usize,
    pub timings: Timings,
}

/// Runs detection and every test on one image pair.
pub fn analyze(
    instance: &TestInstance,
    detector: &Detector<'_>,
    cfg: &SearchConfig,
    permutations: Option<(usize, u64)>,
) -> Result<TestResult> {
    let start = Instant::now();
    check_len("test image", detector.pixels(), instance.pixels())?;
    let region = detector.detect(&instance.x)?;
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let detect_ms = ms(start);
    let dec = decompose(instance, &region)?;
    let line = dec.line();
    let (at_obs, zsub) = detector.region_and_interval(&line, dec.z_obs)?;
    if !at_obs.same_pixels(&region) {
        return Err(Error::Consistency(
            "line pipeline disagrees with the concrete region at z_obs".into(),
        ));
    }
    let search_start = Instant::now();
    let outcome = parametric_search(detector, &dec, &region, cfg)?;
    let search_ms = ms(search_start);
    let tg = TruncatedGaussian::new(dec.sigma2, outcome.truncation.clone())?;
    let p_naive = naive_p(dec.z_obs, dec.sigma2);
    let perm_start = Instant::now();
    let p_permutation = match permutations {
        Some((count, seed)) => Some(permutation_p(instance, detector, count, seed)?),
        None => None,
    };
    let permutation_ms = ms(perm_start);
    Ok(TestResult {
        region: region.pixels().to_vec(),
        z_obs: dec.z_obs,
        sigma2: dec.sigma2,
        intervals: outcome.truncation.intervals().to_vec(),
        zsub,
        p_selective: selective_p(dec.z_obs, &tg)?,
        p_naive,
        p_bonferroni: bonferroni_p(p_naive, instance.pixels()),
        p_oc: oc_p(dec.z_obs, dec.sigma2, zsub)?,
        p_permutation,
        plan_seed: detector.plan().spec().seed,
        pieces: outcome.pieces,
        degenerate: outcome.degenerate,
        timings: Timings {
            detect_ms,
            search_ms,
            permutation_ms,
            total_ms: ms(start),
        },
    })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn region(pixels: &[usize]) -> AnomalyRegion {
        AnomalyRegion::new(pixels.to_vec(), 0.8)
    }

    fn random_instance(rng: &mut ChaCha8Rng, cov: CovarianceModel) -> TestInstance {
        let x = cov.sample(rng);
        let x_ref = cov.sample(rng);
        TestInstance::new(x, x_ref, cov).unwrap()
    }

    #[test]
    fn statistic_examples() {
        let mut x = vec![0.0; 4];
        x[0] = 3.0;
        x[1] = 5.0;
        let inst = TestInstance::new(x, vec![1.0; 4], CovarianceModel::identity(4)).unwrap();
        assert_eq!(test_statistic(&inst, &region(&[0, 1])).unwrap(), 3.0);
        let same = TestInstance::new(vec![2.0; 4], vec![2.0; 4], CovarianceModel::identity(4)).unwrap();
        assert_eq!(test_statistic(&same, &region(&[1, 3])).unwrap(), 0.0);
        assert!(matches!(test_statistic(&inst, &region(&[])), Err(Error::EmptyRegion)));
    }

    #[test]
    fn statistic_equals_contrast_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, CovarianceModel::identity(16));
            let r = region(&[1, 4, 9, 15]);
            let direct = test_statistic(&inst, &r).unwrap();
            let nu = contrast(&r, 16).unwrap();
            assert!((direct - dot(&nu, &inst.stacked())).abs() < 1e-12);
        }
    }

    #[test]
    fn decomposition_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..100 {
            let cov = if trial % 2 == 0 {
                CovarianceModel::identity(16)
            } else {
                CovarianceModel::ar(16)
            };
            let inst = random_instance(&mut rng, cov);
            let m = rng.random_range(1..=16);
            let mut pix: Vec<usize> = (0..16).collect();
            pix.shuffle(&mut rng);
            pix.truncate(m);
            pix.sort_unstable();
            let dec = decompose(&inst, &region(&pix)).unwrap();
            assert!((dot(&dec.nu, &dec.b) - 1.0).abs() < 1e-12);
            assert!(dot(&dec.nu, &dec.a).abs() < 1e-12);
            let rebuilt = dec.line().eval(dec.z_obs);
            for (r, s) in rebuilt.iter().zip(inst.stacked()) {
                assert!((r - s).abs() < 1e-10);
            }
            if trial % 2 == 0 {
                assert!((dec.sigma2 - 2.0 / m as f64).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn ar_variance_matches_dense_quadratic_form() {
        let cov = CovarianceModel::ar(16);
        let inst = TestInstance::new(vec![0.0; 16], vec![0.0; 16], cov).unwrap();
        let r = region(&[0, 2, 3, 7, 11]);
        let dec = decompose(&inst, &r).unwrap();
        let dense = cov.dense();
        let half: f64 = (0..16)
            .flat_map(|i| (0..16).map(move |j| (i, j)))
            .map(|(i, j)| dec.nu[i] * dense[i * 16 + j] * dec.nu[j])
            .sum();
        assert!((dec.sigma2 - 2.0 * half).abs() < 1e-14);
    }

    #[test]
    fn selective_examples() {
        let sigma2 = 0.5;
        let z = 0.9;
        let full = TruncatedGaussian::new(sigma2, IntervalSet::real_line()).unwrap();
        assert!((selective_p(z, &full).unwrap() - naive_p(z, sigma2)).abs() < 1e-15);
        let upper = TruncatedGaussian::new(
            sigma2,
            IntervalSet::from_parts([FixedInterval::new(z, f64::INFINITY)], 0.0),
        )
        .unwrap();
        assert!((selective_p(z, &upper).unwrap() - 1.0).abs() < 1e-15);
        let empty = TruncatedGaussian::new(sigma2, IntervalSet::empty()).unwrap();
        assert!(matches!(selective_p(z, &empty), Err(Error::MassUnderflow { .. })));
    }

    #[test]
    fn naive_examples() {
        assert_eq!(naive_p(0.0, 2.0), 1.0);
        let sigma = 0.7;
        assert!((naive_p(1.959963984540054 * sigma, sigma * sigma) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn bonferroni_examples() {
        assert_eq!(bonferroni_p(0.0, 64), 0.0);
        assert!((bonferroni_p(0.2, 2) - 0.8).abs() < 1e-15);
        // 2^64 · 1e-30 = 1.8446744073709552e-11
        assert!((bonferroni_p(1e-30, 64) / 1.8446744073709552e-11 - 1.0).abs() < 1e-12);
        // 2^4096 overflows f64, the log form does not.
        assert_eq!(bonferroni_p(1e-30, 4096), 1.0);
        assert_eq!(bonferroni_p(0.9, 1), 1.0);
    }

    #[test]
    fn oc_reduces_to_naive_on_real_line() {
        assert!((oc_p(1.3, 0.4, FixedInterval::REAL_LINE).unwrap() - naive_p(1.3, 0.4)).abs() < 1e-15);
    }

    #[test]
    fn selective_is_monotone_in_statistic() {
        let tg = TruncatedGaussian::new(
            1.0,
            IntervalSet::from_parts([FixedInterval::new(-3.0, -0.5), FixedInterval::new(0.2, 4.0)], 0.0),
        )
        .unwrap();
        let mut prev = 1.0;
        for i in 0..60 {
            let p = selective_p(i as f64 * 0.1, &tg).unwrap();
            assert!(p <= prev + 1e-15);
            prev = p;
        }
    }

    #[test]
    fn adaptive_range_bounds_the_ignored_mass() {
        let cfg = SearchConfig {
            tail_tolerance: Some(1e-10),
            ..SearchConfig::default()
        };
        let sigma = 0.3;
        let zsub = FixedInterval::new(0.1, 0.1 + 0.01 * sigma);
        let range = cfg.adaptive_range(0.1, sigma, zsub);
        let r = range.hi / sigma;
        assert!(r < 20.0 && range.lo == -range.hi);
        let kept = log_interval_mass(zsub.lo / sigma, zsub.hi / sigma);
        assert!(std::f64::consts::LN_2 + log_sf(r) <= kept + 1e-10f64.ln());
        assert!(std::f64::consts::LN_2 + log_sf(r - 0.01) > kept + 1e-10f64.ln());
        assert_eq!(
            SearchConfig::default().adaptive_range(0.1, sigma, zsub),
            SearchConfig::default().range(0.1, sigma)
        );
        // A far observation keeps at least one σ on either side of it.
        let far = cfg.adaptive_range(9.0 * sigma, sigma, FixedInterval::new(8.9 * sigma, 9.1 * sigma));
        assert!(far.hi >= 10.0 * sigma - 1e-12);
    }

    #[test]
    fn scan_with_constant_region_is_one_interval() {
        let observed = region(&[2]);
        let range = FixedInterval::new(-3.0, 5.0);
        let out = scan_line(&observed, range, 1e-4, 100, |_| {
            Ok((region(&[2]), FixedInterval::REAL_LINE))
        })
        .unwrap();
        assert_eq!(out.truncation.intervals(), &[range]);
        assert_eq!(out.pieces, 1);
    }

    #[test]
    fn scan_collects_matching_pieces() {
        // Region {0} on [k, k+1) for even k, {1} for odd k.
        let observed = region(&[0]);
        let range = FixedInterval::new(-2.0, 2.0);
        let out = scan_line(&observed, range, 1e-6, 100, |z| {
            let k = z.floor();
            let pix = if (k as i64).rem_euclid(2) == 0 { 0 } else { 1 };
            Ok((region(&[pix]), FixedInterval::new(k, k + 1.0)))
        })
        .unwrap();
        let ivs = out.truncation.intervals();
        assert_eq!(ivs.len(), 2);
        assert_eq!(ivs[0], FixedInterval::new(-2.0, -1.0));
        assert_eq!(ivs[1], FixedInterval::new(0.0, 1.0));
        assert!(ivs.windows(2).all(|w| w[0].hi < w[1].lo));
    }

    #[test]
    fn scan_counts_degenerate_pieces_and_budget() {
        let observed = region(&[0]);
        let range = FixedInterval::new(0.0, 1.0);
        let out = scan_line(&observed, range, 0.25, 100, |z| {
            Ok((region(&[0]), FixedInterval::new(z, z)))
        })
        .unwrap();
        assert_eq!(out.degenerate, 5);
        assert!(out.truncation.is_empty());
        let err = scan_line(&observed, range, 0.25, 2, |z| {
            Ok((region(&[0]), FixedInterval::new(z, z)))
        })
        .unwrap_err();
        assert!(matches!(err, Error::StepBudget { steps: 2, .. }));
    }

    #[test]
    fn scan_rejects_interval_missing_anchor() {
        let err = scan_line(&region(&[0]), FixedInterval::new(0.0, 1.0), 0.1, 10, |z| {
            Ok((region(&[0]), FixedInterval::new(z + 1.0, z + 2.0)))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }
}
