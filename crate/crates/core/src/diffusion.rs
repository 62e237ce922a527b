//! Noise schedule, forward noising and the accelerated reverse sampler.
//!
//! A [`ReconstructionPlan`] freezes every random draw of one reconstruction,
//! which turns `x ↦ D(x)` into a deterministic piecewise-linear map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagate::{Along, Concrete, Selector};
use crate::pwl::{check_len, AffineVector, FixedInterval, ScaleShift};
use crate::unet::{forward, TimeConditioning, Weights};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alphas[t] = Π_{s≤t} (1 − β_s)`, with `alphas[0] = 1`.
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("schedule needs at least one step".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Schedule("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schedule("betas must be strictly increasing".into()));
        }
        let mut alphas = Vec::with_capacity(betas.len() + 1);
        alphas.push(1.0);
        for b in &betas {
            let prev = *alphas.last().unwrap();
            alphas.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alphas })
    }

    /// `β_t` evenly spaced from `beta_start` to `beta_end`.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::Schedule("linear schedule needs at least two steps".into()));
        }
        let step = (beta_end - beta_start) / (total_steps - 1) as f64;
        Self::from_betas((0..total_steps).map(|i| beta_start + step * i as f64).collect())
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `α_t` for `t ∈ 0..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// Reverse-step noise scale for the jump `current → prev`.
    pub fn sigma(&self, current: usize, prev: usize, eta: f64) -> f64 {
        let (ac, ap) = (self.alpha(current), self.alpha(prev));
        eta * ((1.0 - ap) / (1.0 - ac)).sqrt() * (1.0 - ac / ap).sqrt()
    }
}

/// Everything needed to replay one reconstruction exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    pub seed: u64,
    pub total_steps: usize,
    pub t_start: usize,
    /// Strictly increasing, ending at `t_start`; empty iff `t_start == 0`.
    pub tau: Vec<usize>,
    pub eta: f64,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for PlanSpec {
    fn default() -> Self {
        Self::evenly_spaced(1000, 460, 5, 1.0, 1e-4, 2e-2, 0)
    }
}

impl PlanSpec {
    /// `steps` timesteps spread evenly over `1..=t_start` (rounded, deduplicated).
    pub fn evenly_spaced(
        total_steps: usize,
        t_start: usize,
        steps: usize,
        eta: f64,
        beta_start: f64,
        beta_end: f64,
        seed: u64,
    ) -> Self {
        Self {
            seed,
            total_steps,
            t_start,
            tau: evenly_spaced_tau(t_start, steps),
            eta,
            beta_start,
            beta_end,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.total_steps, self.beta_start, self.beta_end)
    }
}

pub fn evenly_spaced_tau(t_start: usize, steps: usize) -> Vec<usize> {
    if t_start == 0 || steps == 0 {
        return Vec::new();
    }
    if steps == 1 {
        return vec![t_start];
    }
    let mut tau: Vec<usize> = (0..steps)
        .map(|i| {
            let v = 1.0 + (t_start as f64 - 1.0) * i as f64 / (steps - 1) as f64;
            v.round() as usize
        })
        .collect();
    tau.dedup();
    tau
}

/// A plan with its frozen noise realised for images of length `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionPlan {
    spec: PlanSpec,
    forward_noise: Vec<f64>,
    /// `step_noise[i]` is used on the jump `tau[i] → tau[i-1]` (or `→ 0`).
    step_noise: Vec<Vec<f64>>,
}

impl ReconstructionPlan {
    pub fn new(spec: PlanSpec, n: usize) -> Result<Self> {
        let PlanSpec {
            total_steps,
            t_start,
            ref tau,
            eta,
            ..
        } = spec;
        if t_start > total_steps {
            return Err(Error::Schedule(format!("T' = {t_start} exceeds T = {total_steps}")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Schedule(format!("eta = {eta} outside [0, 1]")));
        }
        if tau.windows(2).any(|w| w[0] >= w[1]) || tau.first().is_some_and(|t| *t == 0) {
            return Err(Error::Schedule("tau must be strictly increasing within 1..=T".into()));
        }
        if tau.last().copied().unwrap_or(0) != t_start {
            return Err(Error::Schedule(format!("tau must end at T' = {t_start}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let forward_noise = draw(&mut rng);
        let step_noise = (0..tau.len()).map(|_| draw(&mut rng)).collect();
        Ok(Self {
            spec,
            forward_noise,
            step_noise,
        })
    }

    /// Same schedule and steps with explicitly given noise (mainly for tests).
    pub fn with_noise(spec: PlanSpec, forward_noise: Vec<f64>, step_noise: Vec<Vec<f64>>) -> Result<Self> {
        let n = forward_noise.len();
        let mut plan = Self::new(spec, n)?;
        check_len("step noise count", plan.step_noise.len(), step_noise.len())?;
        for s in &step_noise {
            check_len("step noise", n, s.len())?;
        }
        plan.forward_noise = forward_noise;
        plan.step_noise = step_noise;
        Ok(plan)
    }

    pub fn spec(&self) -> &PlanSpec {
        &self.spec
    }

    pub fn pixels(&self) -> usize {
        self.forward_noise.len()
    }

    pub fn tau(&self) -> &[usize] {
        &self.spec.tau
    }

    /// `(current, prev)` timestep pairs in the order they are applied.
    pub fn jumps(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let tau = &self.spec.tau;
        (0..tau.len())
            .rev()
            .map(move |i| (i, tau[i], if i == 0 { 0 } else { tau[i - 1] }))
    }

    pub fn forward_noise(&self) -> &[f64] {
        &self.forward_noise
    }

    pub fn step_noise(&self, i: usize) -> &[f64] {
        &self.step_noise[i]
    }

    /// Time conditioning for every step of the plan, in `tau` order.
    pub fn conditioning(&self, weights: &Weights) -> Vec<TimeConditioning> {
        self.spec
            .tau
            .iter()
            .map(|&t| TimeConditioning::new(weights, t))
            .collect()
    }
}

/// Coefficients of one reverse jump written as
/// `x_prev = keep·x_t + noise_gain·ε_θ(x_t) + σ·ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub keep: f64,
    pub noise_gain: f64,
    pub sigma: f64,
}

pub fn step_coefficients(schedule: &NoiseSchedule, current: usize, prev: usize, eta: f64) -> Result<StepCoefficients> {
    let (ac, ap) = (schedule.alpha(current), schedule.alpha(prev));
    let sigma = schedule.sigma(current, prev, eta);
    let residual = 1.0 - ap - sigma * sigma;
    if residual < -1e-12 {
        return Err(Error::Schedule(format!(
            "1 - alpha_{prev} - sigma^2 = {residual} < 0 on jump {current} -> {prev}"
        )));
    }
    let direction = residual.max(0.0).sqrt();
    let keep = (ap / ac).sqrt();
    Ok(StepCoefficients {
        keep,
        noise_gain: direction - keep * (1.0 - ac).sqrt(),
        sigma,
    })
}

fn check_plan(plan: &ReconstructionPlan, schedule: &NoiseSchedule) -> Result<()> {
    if schedule.total_steps() != plan.spec.total_steps {
        return Err(Error::Schedule(format!(
            "plan expects T = {}, schedule has T = {}",
            plan.spec.total_steps,
            schedule.total_steps()
        )));
    }
    Ok(())
}

fn forward_with<S: Selector>(
    sel: &mut S,
    x: &S::Value,
    plan: &ReconstructionPlan,
    schedule: &NoiseSchedule,
) -> Result<S::Value> {
    let n = plan.pixels();
    check_len("image", n, S::len(x))?;
    let alpha = schedule.alpha(plan.spec.t_start);
    let noise_scale = (1.0 - alpha).sqrt();
    let shift = plan.forward_noise.iter().map(|e| noise_scale * e).collect();
    sel.linear(
        &ScaleShift {
            len: n,
            scale: alpha.sqrt(),
            shift: Some(shift),
        },
        x,
    )
}

fn reverse_step_with<S: Selector>(
    sel: &mut S,
    x_t: &S::Value,
    step: usize,
    plan: &ReconstructionPlan,
    schedule: &NoiseSchedule,
    weights: &Weights,
    cond: &TimeConditioning,
) -> Result<S::Value> {
    let current = plan.spec.tau[step];
    let prev = if step == 0 { 0 } else { plan.spec.tau[step - 1] };
    let coef = step_coefficients(schedule, current, prev, plan.spec.eta)?;
    let eps = forward(sel, weights, cond, x_t)?;
    let mut next = sel.axpby(coef.keep, x_t, coef.noise_gain, &eps)?;
    if coef.sigma != 0.0 {
        let offset: Vec<f64> = plan.step_noise[step].iter().map(|e| coef.sigma * e).collect();
        sel.add_offset(&mut next, &offset)?;
    }
    Ok(next)
}

/// `D(x)` for any selector, with time conditioning precomputed per step.
pub(crate) fn reconstruct_with<S: Selector>(
    sel: &mut S,
    x: &S::Value,
    plan: &ReconstructionPlan,
    schedule: &NoiseSchedule,
    weights: &Weights,
    conditioning: &[TimeConditioning],
) -> Result<S::Value> {
    check_plan(plan, schedule)?;
    check_len("time conditioning", plan.spec.tau.len(), conditioning.len())?;
    if plan.spec.tau.is_empty() {
        return Ok(x.clone());
    }
    let mut state = forward_with(sel, x, plan, schedule)?;
    for step in (0..plan.spec.tau.len()).rev() {
        state = reverse_step_with(sel, &state, step, plan, schedule, weights, &conditioning[step])?;
    }
    Ok(state)
}

/// `√α_{T'}·x + √(1 − α_{T'})·ε` with the plan's frozen `ε`.
pub fn forward_noise(x: &[f64], plan: &ReconstructionPlan, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_plan(plan, schedule)?;
    forward_with(&mut Concrete, &x.to_vec(), plan, schedule)
}

/// One jump `tau[step] → tau[step − 1]` (or `→ 0` for `step == 0`).
pub fn reverse_step(
    x_t: &[f64],
    step: usize,
    plan: &ReconstructionPlan,
    schedule: &NoiseSchedule,
    weights: &Weights,
) -> Result<Vec<f64>> {
    check_plan(plan, schedule)?;
    if step >= plan.spec.tau.len() {
        return Err(Error::InvalidArgument(format!("step {step} outside plan")));
    }
    let cond = TimeConditioning::new(weights, plan.spec.tau[step]);
    reverse_step_with(&mut Concrete, &x_t.to_vec(), step, plan, schedule, weights, &cond)
}

pub fn reconstruct(
    x: &[f64],
    plan: &ReconstructionPlan,
    schedule: &NoiseSchedule,
    weights: &Weights,
) -> Result<Vec<f64>> {
    let cond = plan.conditioning(weights);
    reconstruct_with(&mut Concrete, &x.to_vec(), plan, schedule, weights, &cond)
}

pub fn reconstruct_affine(
    line: &AffineVector,
    anchor_z: f64,
    current: FixedInterval,
    plan: &ReconstructionPlan,
    schedule: &NoiseSchedule,
    weights: &Weights,
) -> Result<(AffineVector, FixedInterval)> {
    let cond = plan.conditioning(weights);
    let mut along = Along::new(anchor_z, current)?;
    let out = reconstruct_with(&mut along, line, plan, schedule, weights, &cond)?;
    Ok((out, along.interval()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNetConfig;

    fn small_spec(t_start: usize, steps: usize, eta: f64) -> PlanSpec {
        PlanSpec::evenly_spaced(1000, t_start, steps, eta, 1e-4, 2e-2, 7)
    }

    #[test]
    fn alpha_is_running_product() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha(2) - 0.72).abs() < 1e-15);
        let lin = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        for t in 1..=1000 {
            assert_eq!(lin.alpha(t), lin.alpha(t - 1) * (1.0 - lin.beta(t)));
            assert!(lin.alpha(t) < lin.alpha(t - 1));
        }
        assert!((lin.beta(1) - 1e-4).abs() < 1e-18 && (lin.beta(1000) - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5, 1.0]).is_err());
    }

    #[test]
    fn default_tau_is_five_even_steps() {
        assert_eq!(evenly_spaced_tau(460, 5), vec![1, 116, 231, 345, 460]);
        assert_eq!(evenly_spaced_tau(3, 10), vec![1, 2, 3]);
        assert!(evenly_spaced_tau(0, 5).is_empty());
    }

    #[test]
    fn sigma_vanishes_for_eta_zero_and_last_jump() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        assert_eq!(s.sigma(460, 345, 0.0), 0.0);
        assert_eq!(s.sigma(1, 0, 1.0), 0.0);
        assert!(s.sigma(460, 345, 1.0) > 0.0);
    }

    #[test]
    fn plan_validation() {
        let mut spec = small_spec(460, 5, 1.0);
        spec.tau = vec![1, 116, 116, 460];
        assert!(ReconstructionPlan::new(spec, 4).is_err());
        let mut spec = small_spec(460, 5, 1.0);
        spec.eta = 1.5;
        assert!(ReconstructionPlan::new(spec, 4).is_err());
        let mut spec = small_spec(460, 5, 1.0);
        spec.tau.pop();
        assert!(ReconstructionPlan::new(spec, 4).is_err());
    }

    #[test]
    fn forward_noise_with_zero_noise_scales() {
        let spec = small_spec(460, 5, 1.0);
        let plan = ReconstructionPlan::with_noise(spec.clone(), vec![0.0; 3], vec![vec![0.0; 3]; 5]).unwrap();
        let s = spec.schedule().unwrap();
        let out = forward_noise(&[1.0, -2.0, 3.0], &plan, &s).unwrap();
        let a = s.alpha(460).sqrt();
        assert_eq!(out, vec![a, -2.0 * a, 3.0 * a]);
    }

    #[test]
    fn forward_noise_is_affine() {
        let spec = small_spec(460, 5, 1.0);
        let plan = ReconstructionPlan::new(spec.clone(), 16).unwrap();
        let s = spec.schedule().unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let fxy = forward_noise(&xy, &plan, &s).unwrap();
        let fy = forward_noise(&y, &plan, &s).unwrap();
        for i in 0..16 {
            assert!((fxy[i] - fy[i] - s.alpha(460).sqrt() * x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_network_reverse_step_closed_form() {
        let spec = small_spec(460, 5, 1.0);
        let plan = ReconstructionPlan::new(spec.clone(), 64).unwrap();
        let s = spec.schedule().unwrap();
        let zero = Weights::zeros(UNetConfig::default()).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let (current, prev) = (460, 345);
        let out = reverse_step(&x, 4, &plan, &s, &zero).unwrap();
        let ratio = (s.alpha(prev) / s.alpha(current)).sqrt();
        let sigma = s.sigma(current, prev, 1.0);
        for i in 0..64 {
            let expected = ratio * x[i] + sigma * plan.step_noise(4)[i];
            assert!((out[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_zero_is_noise_free_and_repeatable() {
        let spec = small_spec(460, 5, 0.0);
        let plan_a = ReconstructionPlan::new(spec.clone(), 64).unwrap();
        let plan_b = ReconstructionPlan::new(spec.with_seed(99), 64).unwrap();
        let s = spec.schedule().unwrap();
        let w = Weights::init(UNetConfig::default(), 1).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        // Different step noise but σ = 0: identical jump.
        assert_eq!(
            reverse_step(&x, 3, &plan_a, &s, &w).unwrap(),
            reverse_step(&x, 3, &plan_b, &s, &w).unwrap()
        );
    }

    #[test]
    fn two_step_zero_network_hand_unrolled() {
        // τ = (1, 2), η = 0, ε = 0, ε_θ ≡ 0:
        // x₂ = √α₂·x, x₁ = √(α₁/α₂)·x₂, x₀ = √(α₀/α₁)·x₁ = x.
        let spec = PlanSpec {
            seed: 0,
            total_steps: 10,
            t_start: 2,
            tau: vec![1, 2],
            eta: 0.0,
            beta_start: 0.1,
            beta_end: 0.2,
        };
        let plan = ReconstructionPlan::with_noise(spec.clone(), vec![0.0; 64], vec![vec![0.0; 64]; 2]).unwrap();
        let s = spec.schedule().unwrap();
        let zero = Weights::zeros(UNetConfig::default()).unwrap();
        let x: Vec<f64> = (0..64).map(|i| i as f64 / 7.0).collect();
        let out = reconstruct(&x, &plan, &s, &zero).unwrap();
        for (o, xi) in out.iter().zip(&x) {
            assert!((o - xi).abs() < 1e-12);
        }
        // With frozen forward noise ε the correction is √(1−α₂)/√α₂ · ε.
        let eps: Vec<f64> = (0..64).map(|i| (i as f64).cos()).collect();
        let plan = ReconstructionPlan::with_noise(spec, eps.clone(), vec![vec![0.0; 64]; 2]).unwrap();
        let out = reconstruct(&x, &plan, &s, &zero).unwrap();
        let gain = ((1.0 - s.alpha(2)) / s.alpha(2)).sqrt();
        for i in 0..64 {
            assert!((out[i] - x[i] - gain * eps[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_tau_is_identity() {
        let spec = small_spec(0, 5, 1.0);
        let plan = ReconstructionPlan::new(spec.clone(), 64).unwrap();
        let w = Weights::init(UNetConfig::default(), 1).unwrap();
        let x: Vec<f64> = (0..64).map(|i| i as f64).collect();
        assert_eq!(reconstruct(&x, &plan, &spec.schedule().unwrap(), &w).unwrap(), x);
    }

    #[test]
    fn reconstruction_is_deterministic() {
        let spec = small_spec(460, 5, 1.0);
        let plan = ReconstructionPlan::new(spec.clone(), 64).unwrap();
        let s = spec.schedule().unwrap();
        let w = Weights::init(UNetConfig::default(), 1).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.7).sin()).collect();
        let a = reconstruct(&x, &plan, &s, &w).unwrap();
        let b = reconstruct(&x, &ReconstructionPlan::new(spec.clone(), 64).unwrap(), &s, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_line_keeps_interval() {
        let spec = small_spec(460, 5, 1.0);
        let plan = ReconstructionPlan::new(spec.clone(), 64).unwrap();
        let s = spec.schedule().unwrap();
        let w = Weights::init(UNetConfig::default(), 1).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.7).sin()).collect();
        let current = FixedInterval::new(-1.0, 1.0);
        let (out, iv) =
            reconstruct_affine(&AffineVector::constant_line(x.clone()), 0.0, current, &plan, &s, &w).unwrap();
        assert_eq!(iv, current);
        assert_eq!(out.constant(), &reconstruct(&x, &plan, &s, &w).unwrap()[..]);
    }

    #[test]
    fn plan_spec_json_round_trip() {
        let spec = small_spec(460, 5, 1.0);
        let back: PlanSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(
            ReconstructionPlan::new(back, 64).unwrap(),
            ReconstructionPlan::new(spec, 64).unwrap()
        );
    }

    #[test]
    fn mismatched_schedule_rejected() {
        let plan = ReconstructionPlan::new(small_spec(460, 5, 1.0), 64).unwrap();
        let other = NoiseSchedule::linear(500, 1e-4, 2e-2).unwrap();
        let w = Weights::zeros(UNetConfig::default()).unwrap();
        assert!(matches!(
            reconstruct(&[0.0; 64], &plan, &other, &w),
            Err(Error::Schedule(_))
        ));
    }
}
