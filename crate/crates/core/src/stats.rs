//! Summary statistics for simulation studies.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Binomial, ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};

/// Central `level` acceptance band for the rejection rate of `trials`
/// Bernoulli(`p`) draws: `[q_lo/trials, q_hi/trials]` with `q` the binomial
/// quantiles at `(1 ∓ level)/2`.
pub fn binomial_acceptance(trials: u64, p: f64, level: f64) -> Result<(f64, f64)> {
    if trials == 0 || !(0.0..=1.0).contains(&p) || !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "binomial band needs trials > 0, p in [0,1], level in (0,1); got {trials}, {p}, {level}"
        )));
    }
    let dist = Binomial::new(p, trials).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let tail = 0.5 * (1.0 - level);
    let lo = dist.inverse_cdf(tail);
    let hi = dist.inverse_cdf(1.0 - tail);
    Ok((lo as f64 / trials as f64, hi as f64 / trials as f64))
}

/// Exact (Clopper–Pearson) two-sided interval for a binomial proportion.
pub fn clopper_pearson(successes: u64, trials: u64, level: f64) -> Result<(f64, f64)> {
    if trials == 0 || successes > trials {
        return Err(Error::InvalidArgument(format!(
            "{successes} successes out of {trials} trials"
        )));
    }
    let tail = 0.5 * (1.0 - level);
    let (k, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(k, n - k + 1.0)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .inverse_cdf(tail)
    };
    let hi = if successes == trials {
        1.0
    } else {
        Beta::new(k + 1.0, n - k)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .inverse_cdf(1.0 - tail)
    };
    Ok((lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

/// `P(K > λ)` for the Kolmogorov distribution.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1), with the
/// finite-sample scaling `(√n + 0.12 + 0.11/√n)·D`.
pub fn ks_uniform(samples: &[f64]) -> Result<KsOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("KS test needs at least one sample".into()));
    }
    let mut sorted = samples.to_vec();
    if sorted.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("KS uniform test needs values in [0, 1]".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &u)| (u - i as f64 / n).max((i + 1) as f64 / n - u))
        .fold(0.0, f64::max);
    let root = n.sqrt();
    Ok(KsOutcome {
        statistic,
        p_value: kolmogorov_sf((root + 0.12 + 0.11 / root) * statistic),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceptance_band_for_five_hundred_trials() {
        let (lo, hi) = binomial_acceptance(500, 0.05, 0.99).unwrap();
        // 13 and 38 are the 0.5% and 99.5% quantiles of Binomial(500, 0.05).
        assert!((lo - 0.026).abs() < 1e-12 && (hi - 0.076).abs() < 1e-12, "{lo} {hi}");
    }

    #[test]
    fn acceptance_band_matches_direct_summation() {
        // Sum the pmf by the multiplicative recursion and find the quantiles.
        let (n, p) = (137u64, 0.05f64);
        let mut pmf = (1.0 - p).powi(n as i32);
        let mut cdf = 0.0;
        let (mut lo, mut hi) = (None, None);
        for k in 0..=n {
            cdf += pmf;
            if lo.is_none() && cdf >= 0.005 {
                lo = Some(k);
            }
            if hi.is_none() && cdf >= 0.995 {
                hi = Some(k);
            }
            pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
        }
        let (a, b) = binomial_acceptance(n, p, 0.99).unwrap();
        assert_eq!((a * n as f64).round() as u64, lo.unwrap());
        assert_eq!((b * n as f64).round() as u64, hi.unwrap());
    }

    #[test]
    fn clopper_pearson_reference() {
        // 5/50 at 95%: [0.03327509, 0.21813537]
        let (lo, hi) = clopper_pearson(5, 50, 0.95).unwrap();
        assert!(
            (lo - 0.033_275_09).abs() < 1e-6 && (hi - 0.218_135_37).abs() < 1e-6,
            "{lo} {hi}"
        );
        assert_eq!(clopper_pearson(0, 10, 0.95).unwrap().0, 0.0);
        assert_eq!(clopper_pearson(10, 10, 0.95).unwrap().1, 1.0);
    }

    #[test]
    fn ks_detects_and_accepts() {
        let uniform: Vec<f64> = (0..500).map(|i| (i as f64 + 0.5) / 500.0).collect();
        let ok = ks_uniform(&uniform).unwrap();
        assert!(ok.statistic <= 0.001 + 1e-12 && ok.p_value > 0.99);
        let skewed: Vec<f64> = uniform.iter().map(|u| u * u).collect();
        assert!(ks_uniform(&skewed).unwrap().p_value < 1e-6);
        // D = 0.5 for a single sample at 0.5.
        assert!((ks_uniform(&[0.5]).unwrap().statistic - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kolmogorov_tail_reference() {
        // P(K > 1.36) ≈ 0.0494, P(K > 1.63) ≈ 0.0098
        assert!((kolmogorov_sf(1.36) - 0.0494).abs() < 5e-4);
        assert!((kolmogorov_sf(1.63) - 0.0098).abs() < 3e-4);
    }
}
