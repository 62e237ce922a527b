//! Standardized non-Gaussian noise families, their 1-Wasserstein distance to
//! `N(0, 1)`, and calibration of a family parameter to a target distance.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::{gamma_lr, ln_gamma};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::normal::{cdf as normal_cdf, log_sf};

/// Half-width of the integration window for W₁.
const W1_SPAN: f64 = 60.0;
const W1_PANELS: usize = 480;
const W1_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    /// Parameter: shape `a ≥ 0`.
    SkewNormal,
    /// `N(0,1) + Exp` with exponential mean `K ≥ 0`.
    ExpModifiedGaussian,
    /// Density `∝ exp(−|x|^β)`, `β ≤ 2`.
    GeneralizedNormal,
    /// Degrees of freedom `ν > 2`.
    StudentT,
}

impl FamilyKind {
    pub const ALL: [Self; 4] = [
        Self::SkewNormal,
        Self::ExpModifiedGaussian,
        Self::GeneralizedNormal,
        Self::StudentT,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::SkewNormal => "skew-normal",
            Self::ExpModifiedGaussian => "exp-modified-gaussian",
            Self::GeneralizedNormal => "generalized-normal",
            Self::StudentT => "student-t",
        }
    }

    /// The parameter at which the family is exactly Gaussian.
    pub fn gaussian_param(self) -> f64 {
        self.param_from_deviation(0.0)
    }

    // Calibration works in a deviation coordinate `u ≥ 0` with `u = 0` Gaussian
    // and W₁ increasing in `u`.
    fn param_from_deviation(self, u: f64) -> f64 {
        match self {
            Self::SkewNormal | Self::ExpModifiedGaussian => u,
            Self::GeneralizedNormal => 2.0 - u,
            Self::StudentT => 1.0 / u,
        }
    }

    fn deviation_bracket(self) -> (f64, f64) {
        match self {
            Self::SkewNormal => (0.0, 100.0),
            Self::ExpModifiedGaussian => (0.0, 50.0),
            Self::GeneralizedNormal => (0.0, 1.7),
            Self::StudentT => (0.0, 1.0 / 2.05),
        }
    }

    pub fn validate(self, param: f64) -> Result<()> {
        let ok = match self {
            Self::SkewNormal | Self::ExpModifiedGaussian => param >= 0.0 && param.is_finite(),
            Self::GeneralizedNormal => param > 0.0 && param <= 2.0,
            Self::StudentT => param > 2.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Family(format!(
                "{} does not accept parameter {param}",
                self.label()
            )))
        }
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown family {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonGaussianFamily {
    pub family: FamilyKind,
    pub target_w1: f64,
    pub calibrated_param: f64,
}

impl NonGaussianFamily {
    pub fn calibrated(family: FamilyKind, target_w1: f64) -> Result<Self> {
        Ok(Self {
            family,
            target_w1,
            calibrated_param: calibrate_family(family, target_w1)?,
        })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        standardized_cdf(self.family, self.calibrated_param, x)
    }

    /// One draw with zero mean and unit variance.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        sample_standardized(self.family, self.calibrated_param, rng)
    }
}

/// Adaptive Simpson on `[a, b]` to absolute tolerance `tol`.
pub(crate) fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Owen's T function for `a ≥ 0`, via `t = tan θ`.
fn owens_t(h: f64, a: f64) -> f64 {
    if a == 0.0 || h.abs() > 40.0 {
        return 0.0;
    }
    let half_h2 = 0.5 * h * h;
    let f = |theta: f64| {
        let c = theta.cos();
        (-half_h2 / (c * c)).exp()
    };
    adaptive_simpson(&f, 0.0, a.atan(), 1e-15) / (2.0 * PI)
}

/// Mean and standard deviation of the unstandardized family.
fn moments(kind: FamilyKind, param: f64) -> (f64, f64) {
    match kind {
        FamilyKind::SkewNormal => {
            let delta = param / (1.0 + param * param).sqrt();
            (delta * (2.0 / PI).sqrt(), (1.0 - 2.0 * delta * delta / PI).sqrt())
        }
        FamilyKind::ExpModifiedGaussian => (param, (1.0 + param * param).sqrt()),
        FamilyKind::GeneralizedNormal => (0.0, (ln_gamma(3.0 / param) - ln_gamma(1.0 / param)).exp().sqrt()),
        FamilyKind::StudentT => {
            if param.is_infinite() {
                (0.0, 1.0)
            } else {
                (0.0, (param / (param - 2.0)).sqrt())
            }
        }
    }
}

fn raw_cdf(kind: FamilyKind, param: f64, y: f64) -> f64 {
    match kind {
        FamilyKind::SkewNormal => (normal_cdf(y) - 2.0 * owens_t(y, param)).clamp(0.0, 1.0),
        FamilyKind::ExpModifiedGaussian => {
            if param < 1e-6 {
                return normal_cdf(y);
            }
            let inv = 1.0 / param;
            let log_corr = -y * inv + 0.5 * inv * inv + log_sf(inv - y);
            (normal_cdf(y) - log_corr.exp()).clamp(0.0, 1.0)
        }
        FamilyKind::GeneralizedNormal => {
            let t = y.abs().powf(param);
            if t == 0.0 {
                return 0.5;
            }
            let p = if t.is_finite() { gamma_lr(1.0 / param, t) } else { 1.0 };
            0.5 + 0.5 * y.signum() * p
        }
        FamilyKind::StudentT => {
            if param.is_infinite() {
                normal_cdf(y)
            } else {
                StudentsT::new(0.0, 1.0, param).expect("validated dof").cdf(y)
            }
        }
    }
}

/// CDF of the family standardized to zero mean and unit variance.
pub fn standardized_cdf(kind: FamilyKind, param: f64, x: f64) -> f64 {
    let (m, s) = moments(kind, param);
    raw_cdf(kind, param, m + s * x)
}

/// `W₁ = ∫|F(x) − Φ(x)| dx` for the standardized family, equal to the
/// quantile form `∫₀¹ |Q(u) − Φ⁻¹(u)| du`.
pub fn wasserstein1_to_std_normal(kind: FamilyKind, param: f64) -> Result<f64> {
    kind.validate(param)?;
    let f = |x: f64| (standardized_cdf(kind, param, x) - normal_cdf(x)).abs();
    let width = 2.0 * W1_SPAN / W1_PANELS as f64;
    let tol = W1_TOLERANCE / W1_PANELS as f64;
    let w1: f64 = (0..W1_PANELS)
        .map(|i| {
            let a = -W1_SPAN + i as f64 * width;
            adaptive_simpson(&f, a, a + width, tol)
        })
        .sum();
    if w1.is_finite() {
        Ok(w1)
    } else {
        Err(Error::Family(format!(
            "W1 of {} at {param} is not finite",
            kind.label()
        )))
    }
}

fn w1_at_deviation(kind: FamilyKind, u: f64) -> Result<f64> {
    if u == 0.0 {
        return Ok(0.0);
    }
    wasserstein1_to_std_normal(kind, kind.param_from_deviation(u))
}

/// Bisects the family parameter until W₁ matches `target` to well under 1e-4.
pub fn calibrate_family(kind: FamilyKind, target: f64) -> Result<f64> {
    if target == 0.0 {
        return Ok(kind.gaussian_param());
    }
    let (lo, hi) = kind.deviation_bracket();
    let grid: Vec<f64> = (0..=8)
        .map(|i| w1_at_deviation(kind, lo + (hi - lo) * i as f64 / 8.0))
        .collect::<Result<_>>()?;
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Family(format!(
            "W1 of {} is not monotone on its bracket",
            kind.label()
        )));
    }
    let max = grid[8];
    if !(target > 0.0 && target < max) {
        return Err(Error::Calibration {
            target,
            lo: 0.0,
            hi: max,
        });
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        let w = w1_at_deviation(kind, mid)?;
        if (w - target).abs() < 1e-9 {
            return Ok(kind.param_from_deviation(mid));
        }
        if w < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(kind.param_from_deviation(0.5 * (a + b)))
}

pub fn sample_standardized(kind: FamilyKind, param: f64, rng: &mut impl Rng) -> f64 {
    let (m, s) = moments(kind, param);
    let raw = match kind {
        FamilyKind::SkewNormal => {
            let delta = param / (1.0 + param * param).sqrt();
            let u0: f64 = rng.sample(StandardNormal);
            let u1: f64 = rng.sample(StandardNormal);
            delta * u0.abs() + (1.0 - delta * delta).sqrt() * u1
        }
        FamilyKind::ExpModifiedGaussian => {
            let z: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(Exp1);
            z + param * e
        }
        FamilyKind::GeneralizedNormal => {
            let g = Gamma::new(1.0 / param, 1.0).expect("validated shape").sample(rng);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * g.powf(1.0 / param)
        }
        FamilyKind::StudentT => {
            if param.is_infinite() {
                rng.sample(StandardNormal)
            } else {
                StudentT::new(param).expect("validated dof").sample(rng)
            }
        }
    };
    (raw - m) / s
}
