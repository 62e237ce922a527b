//! Reconstruction-error maps and threshold regions, concrete and along a line.

use serde::{Deserialize, Serialize};

use crate::diffusion::{reconstruct_with, NoiseSchedule, ReconstructionPlan};
use crate::error::{Error, Result};
use crate::propagate::{Along, Concrete, Selector};
use crate::pwl::{self, check_len, AffineVector, FixedInterval, LinearOp};
use crate::unet::{TimeConditioning, Weights};

/// Square averaging filter with zero padding.
///
/// Every output is the sum of in-bounds taps divided by the full kernel area,
/// so the filter is one fixed linear operator (border pixels shrink toward 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kernel_size: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { kernel_size: 3 }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "filter kernel size {} must be odd and positive",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn on_side(self, side: usize) -> AveragingFilter {
        AveragingFilter { spec: self, side }
    }
}

pub struct AveragingFilter {
    pub spec: FilterSpec,
    pub side: usize,
}

impl LinearOp for AveragingFilter {
    fn input_len(&self) -> usize {
        self.side * self.side
    }
    fn output_len(&self) -> usize {
        self.side * self.side
    }
    fn apply_linear(&self, input: &[f64], output: &mut [f64]) {
        let s = self.side as isize;
        let r = (self.spec.kernel_size / 2) as isize;
        let norm = 1.0 / (self.spec.kernel_size * self.spec.kernel_size) as f64;
        for row in 0..s {
            for col in 0..s {
                let mut acc = 0.0;
                for yy in (row - r).max(0)..=(row + r).min(s - 1) {
                    for xx in (col - r).max(0)..=(col + r).min(s - 1) {
                        acc += input[(yy * s + xx) as usize];
                    }
                }
                output[(row * s + col) as usize] = acc * norm;
            }
        }
    }
}

/// Pixels whose error reaches the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRegion {
    pixels: Vec<usize>,
    lambda: f64,
}

impl AnomalyRegion {
    /// `pixels` must be sorted and unique.
    pub fn new(pixels: Vec<usize>, lambda: f64) -> Self {
        debug_assert!(pixels.windows(2).all(|w| w[0] < w[1]));
        Self { pixels, lambda }
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Set equality, ignoring the threshold that produced it.
    pub fn same_pixels(&self, other: &Self) -> bool {
        self.pixels == other.pixels
    }
}

pub(crate) fn image_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::InvalidArgument(format!("{n} pixels do not form a square image")));
    }
    Ok(side)
}

/// `|F(x − D(x))|`, pixelwise.
pub fn error_map(x: &[f64], reconstruction: &[f64], filter: FilterSpec) -> Result<Vec<f64>> {
    check_len("reconstruction", x.len(), reconstruction.len())?;
    filter.validate()?;
    let diff: Vec<f64> = x.iter().zip(reconstruction).map(|(a, b)| a - b).collect();
    let mut filtered = filter.on_side(image_side(x.len())?).apply(&diff)?;
    Concrete.abs(&mut filtered);
    Ok(filtered)
}

pub fn detect_region(error: &[f64], lambda: f64) -> AnomalyRegion {
    let pixels = error
        .iter()
        .enumerate()
        .filter(|(_, e)| **e >= lambda)
        .map(|(i, _)| i)
        .collect();
    AnomalyRegion::new(pixels, lambda)
}

/// The full localization pipeline for one frozen plan.
pub struct Detector<'w> {
    plan: ReconstructionPlan,
    schedule: NoiseSchedule,
    weights: &'w Weights,
    filter: AveragingFilter,
    lambda: f64,
    conditioning: Vec<TimeConditioning>,
}

impl<'w> Detector<'w> {
    pub fn new(plan: ReconstructionPlan, weights: &'w Weights, filter: FilterSpec, lambda: f64) -> Result<Self> {
        filter.validate()?;
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("threshold {lambda} must be positive")));
        }
        let n = plan.pixels();
        check_len("plan noise vs network input", weights.config.pixels(), n)?;
        let schedule = plan.spec().schedule()?;
        let conditioning = plan.conditioning(weights);
        Ok(Self {
            filter: filter.on_side(image_side(n)?),
            plan,
            schedule,
            weights,
            lambda,
            conditioning,
        })
    }

    pub fn pixels(&self) -> usize {
        self.plan.pixels()
    }

    pub fn plan(&self) -> &ReconstructionPlan {
        &self.plan
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn error_with<S: Selector>(&self, sel: &mut S, x: &S::Value) -> Result<S::Value> {
        let recon = reconstruct_with(sel, x, &self.plan, &self.schedule, self.weights, &self.conditioning)?;
        let diff = sel.axpby(1.0, x, -1.0, &recon)?;
        let mut filtered = sel.linear(&self.filter, &diff)?;
        sel.abs(&mut filtered);
        Ok(filtered)
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        reconstruct_with(
            &mut Concrete,
            &x.to_vec(),
            &self.plan,
            &self.schedule,
            self.weights,
            &self.conditioning,
        )
    }

    pub fn error_map(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.error_with(&mut Concrete, &x.to_vec())
    }

    pub fn detect(&self, x: &[f64]) -> Result<AnomalyRegion> {
        Ok(detect_region(&self.error_map(x)?, self.lambda))
    }

    /// The error map along an image line (length `n`) with its fixed interval.
    pub fn error_line(
        &self,
        line: &AffineVector,
        anchor_z: f64,
        current: FixedInterval,
    ) -> Result<(AffineVector, FixedInterval)> {
        let mut along = Along::new(anchor_z, current)?;
        let err = self.error_with(&mut along, line)?;
        Ok((err, along.interval()))
    }

    /// Region at `anchor_z` and the interval on which the whole pipeline,
    /// every ReLU, sign and threshold outcome included, stays fixed.
    ///
    /// `line` may be the stacked `(X, X_ref)` line of length `2n`; only its
    /// first `n` coordinates feed the detector.
    pub fn region_and_interval(&self, line: &AffineVector, anchor_z: f64) -> Result<(AnomalyRegion, FixedInterval)> {
        let n = self.pixels();
        let image_line = match line.len() {
            len if len == n => line.clone(),
            len if len == 2 * n => line.slice(0, n),
            len => {
                return Err(Error::Shape {
                    context: "detector line",
                    expected: 2 * n,
                    actual: len,
                })
            }
        };
        if !anchor_z.is_finite() {
            return Err(Error::InvalidArgument(format!("anchor {anchor_z} is not finite")));
        }
        let (err, interval) = self.error_line(&image_line, anchor_z, FixedInterval::REAL_LINE)?;
        pwl::threshold_interval(&err, self.lambda, anchor_z, interval)
    }
}

/// One-shot form of [`Detector::region_and_interval`].
pub fn region_and_interval(
    line: &AffineVector,
    anchor_z: f64,
    plan: &ReconstructionPlan,
    weights: &Weights,
    filter: FilterSpec,
    lambda: f64,
) -> Result<(AnomalyRegion, FixedInterval)> {
    Detector::new(plan.clone(), weights, filter, lambda)?.region_and_interval(line, anchor_z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Nested-loop filter reading a zero-padded copy of the image.
    fn loop_filter(x: &[f64], side: usize, k: usize) -> Vec<f64> {
        let r = k / 2;
        let padded_side = side + 2 * r;
        let mut padded = vec![0.0; padded_side * padded_side];
        for row in 0..side {
            for col in 0..side {
                padded[(row + r) * padded_side + col + r] = x[row * side + col];
            }
        }
        let mut out = vec![0.0; side * side];
        for row in 0..side {
            for col in 0..side {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += padded[(row + dy) * padded_side + col + dx];
                    }
                }
                out[row * side + col] = s / (k * k) as f64;
            }
        }
        out
    }

    #[test]
    fn identical_reconstruction_has_zero_error() {
        let x: Vec<f64> = (0..64).map(|i| i as f64).collect();
        assert!(error_map(&x, &x, FilterSpec::default())
            .unwrap()
            .iter()
            .all(|e| *e == 0.0));
    }

    #[test]
    fn single_spike_spreads_over_kernel() {
        let x = vec![0.0; 64];
        let mut recon = vec![0.0; 64];
        recon[3 * 8 + 4] = 9.0;
        let e = error_map(&x, &recon, FilterSpec::default()).unwrap();
        for row in 0..8 {
            for col in 0..8 {
                let covered = (2..=4).contains(&row) && (3..=5).contains(&col);
                assert_eq!(e[row * 8 + col], if covered { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn corner_pixel_uses_full_kernel_normalization() {
        let ones = vec![1.0; 64];
        let out = FilterSpec::default().on_side(8).apply(&ones).unwrap();
        assert!((out[0] - 4.0 / 9.0).abs() < 1e-15);
        assert!((out[1] - 6.0 / 9.0).abs() < 1e-15);
        assert!((out[9] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn filter_matches_loop_oracle_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for k in [1, 3, 5] {
            let u: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let f = FilterSpec { kernel_size: k }.on_side(8);
            let fu = f.apply(&u).unwrap();
            for (a, b) in fu.iter().zip(loop_filter(&u, 8, k)) {
                assert!((a - b).abs() < 1e-13);
            }
            let uv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + 2.5 * b).collect();
            let fv = f.apply(&v).unwrap();
            for ((a, b), c) in f.apply(&uv).unwrap().iter().zip(&fu).zip(&fv) {
                assert!((a - (b + 2.5 * c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn error_map_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let diff: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a - b).collect();
        let expected: Vec<f64> = loop_filter(&diff, 8, 3).iter().map(|v| v.abs()).collect();
        for (a, b) in error_map(&x, &r, FilterSpec::default()).unwrap().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn detect_region_examples() {
        assert!(detect_region(&[0.1, 0.5, 0.79], 0.8).is_empty());
        assert_eq!(detect_region(&[0.9, 0.7], 0.8).pixels(), &[0]);
        assert_eq!(detect_region(&[0.8, 0.7], 0.8).pixels(), &[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let e: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..2.0)).collect();
        let brute: Vec<usize> = (0..256).filter(|&i| e[i] >= 0.8).collect();
        assert_eq!(detect_region(&e, 0.8).pixels(), &brute[..]);
    }

    #[test]
    fn non_square_images_rejected() {
        assert!(error_map(&[0.0; 10], &[0.0; 10], FilterSpec::default()).is_err());
        assert!(FilterSpec { kernel_size: 2 }.validate().is_err());
    }
}
