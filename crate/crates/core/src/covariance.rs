//! Pixel covariance models for the synthetic studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pwl::check_len;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKind {
    Identity,
    /// `Σ_ij = ρ^|i−j|` over the flattened pixel index.
    ArCorrelation,
}

impl CovarianceKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Identity => "iid",
            Self::ArCorrelation => "ar",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceModel {
    pub kind: CovarianceKind,
    pub n: usize,
    pub rho: f64,
}

impl CovarianceModel {
    pub fn identity(n: usize) -> Self {
        Self {
            kind: CovarianceKind::Identity,
            n,
            rho: 0.0,
        }
    }

    pub fn ar(n: usize) -> Self {
        Self {
            kind: CovarianceKind::ArCorrelation,
            n,
            rho: 0.5,
        }
    }

    pub fn new(kind: CovarianceKind, n: usize) -> Self {
        match kind {
            CovarianceKind::Identity => Self::identity(n),
            CovarianceKind::ArCorrelation => Self::ar(n),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == CovarianceKind::ArCorrelation && !(self.rho.abs() < 1.0) {
            return Err(Error::Covariance(format!(
                "AR correlation {} is not positive definite",
                self.rho
            )));
        }
        Ok(())
    }

    /// `Σ·v` in `O(n)`; for the AR kernel via a forward and a backward recursion.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("covariance operand", self.n, v.len())?;
        match self.kind {
            CovarianceKind::Identity => Ok(v.to_vec()),
            CovarianceKind::ArCorrelation => {
                let n = self.n;
                let mut fwd = vec![0.0; n];
                let mut bwd = vec![0.0; n];
                let mut acc = 0.0;
                for i in 0..n {
                    acc = v[i] + self.rho * acc;
                    fwd[i] = acc;
                }
                acc = 0.0;
                for i in (0..n).rev() {
                    acc = v[i] + self.rho * acc;
                    bwd[i] = acc;
                }
                Ok((0..n).map(|i| fwd[i] + bwd[i] - v[i]).collect())
            }
        }
    }

    /// Row-major dense matrix.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = match self.kind {
                    CovarianceKind::Identity => f64::from(u8::from(i == j)),
                    CovarianceKind::ArCorrelation => self.rho.powi(i.abs_diff(j) as i32),
                };
            }
        }
        out
    }

    /// One exact draw from `N(0, Σ)`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut x: Vec<f64> = (0..self.n).map(|_| rng.sample(StandardNormal)).collect();
        if self.kind == CovarianceKind::ArCorrelation {
            let innovation = (1.0 - self.rho * self.rho).sqrt();
            for i in 1..self.n {
                x[i] = self.rho * x[i - 1] + innovation * x[i];
            }
        }
        x
    }
}

/// `count` seeded draws from `N(0, Σ)`.
pub fn sample_noise(cov: &CovarianceModel, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    cov.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| cov.sample(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_dense() {
        let cov = CovarianceModel::ar(37);
        let v: Vec<f64> = (0..37).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let dense = cov.dense();
        let fast = cov.matvec(&v).unwrap();
        for i in 0..37 {
            let slow: f64 = (0..37).map(|j| dense[i * 37 + j] * v[j]).sum();
            assert!((slow - fast[i]).abs() < 1e-12);
        }
        assert_eq!(
            CovarianceModel::identity(4).matvec(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn identity_sample_covariance() {
        let count = 20_000;
        let xs = sample_noise(&CovarianceModel::identity(4), count, 1).unwrap();
        let tol = 3.0 / (count as f64).sqrt();
        for i in 0..4 {
            for j in 0..4 {
                let c: f64 = xs.iter().map(|x| x[i] * x[j]).sum::<f64>() / count as f64;
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (c - expected).abs() < tol * if i == j { 1.5 } else { 1.0 },
                    "({i},{j}) = {c}"
                );
            }
        }
    }

    #[test]
    fn ar_lag_one_correlation() {
        let count = 20_000;
        let xs = sample_noise(&CovarianceModel::ar(16), count, 2).unwrap();
        let tol = 3.0 / (count as f64).sqrt();
        for (i, j, expected) in [(0, 1, 0.5), (7, 8, 0.5), (3, 5, 0.25), (0, 0, 1.0), (15, 15, 1.0)] {
            let c: f64 = xs.iter().map(|x| x[i] * x[j]).sum::<f64>() / count as f64;
            assert!((c - expected).abs() < 1.5 * tol, "({i},{j}) = {c}");
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let cov = CovarianceModel::ar(8);
        assert_eq!(sample_noise(&cov, 3, 9).unwrap(), sample_noise(&cov, 3, 9).unwrap());
        assert_ne!(sample_noise(&cov, 3, 9).unwrap(), sample_noise(&cov, 3, 10).unwrap());
    }

    #[test]
    fn invalid_rho_rejected() {
        let cov = CovarianceModel {
            rho: 1.0,
            ..CovarianceModel::ar(4)
        };
        assert!(matches!(sample_noise(&cov, 1, 0), Err(Error::Covariance(_))));
    }
}
