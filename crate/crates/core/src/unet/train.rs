//! Reference trainer: the DDPM noise-prediction loss with hand-written
//! backpropagation and SGD with momentum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{AvgPool2, ConvShape, Upsample2};
use super::{predict_noise, slot, timestep_embedding, TimeConditioning, UNetConfig, Weights};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::pwl::{check_len, LinearOp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Fraction of the dataset held out for the loss check.
    pub holdout_fraction: f64,
    /// Noise draws per held-out image.
    pub holdout_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            seed: 0,
            holdout_fraction: 0.1,
            holdout_draws: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
    /// Mean batch loss at every step.
    pub loss_history: Vec<f64>,
}

/// Activations kept for the backward pass.
struct Cache {
    x: Vec<f64>,
    s1: Vec<f64>,
    p1: Vec<f64>,
    s2: Vec<f64>,
    p2: Vec<f64>,
    s3: Vec<f64>,
    m: Vec<f64>,
    c3: Vec<f64>,
    d3: Vec<f64>,
    c2: Vec<f64>,
    d2: Vec<f64>,
    c1: Vec<f64>,
    d1: Vec<f64>,
    out: Vec<f64>,
}

fn relu(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    v
}

fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    [a, b].concat()
}

fn forward_cached(weights: &Weights, cond: &TimeConditioning, x: &[f64]) -> Result<Cache> {
    let cfg = &weights.config;
    check_len("training input", cfg.pixels(), x.len())?;
    let shapes = cfg.conv_shapes();
    let (w1, w2, w3) = cfg.widths();
    let s = cfg.image_side;
    let layer = |i: usize, input: &[f64], extra: Option<&[f64]>| -> Result<Vec<f64>> {
        super::conv(weights, i, extra).apply(input)
    };
    debug_assert_eq!(shapes.len(), 8);

    let s1 = relu(layer(0, x, Some(&cond.level_bias[0]))?);
    let p1 = AvgPool2 { channels: w1, side: s }.apply(&s1)?;
    let s2 = relu(layer(1, &p1, Some(&cond.level_bias[1]))?);
    let p2 = AvgPool2 {
        channels: w2,
        side: s / 2,
    }
    .apply(&s2)?;
    let s3 = relu(layer(2, &p2, Some(&cond.level_bias[2]))?);
    let m = relu(layer(3, &s3, None)?);
    let c3 = cat(&m, &s3);
    let d3 = relu(layer(4, &c3, None)?);
    let u3 = Upsample2 {
        channels: w3,
        side: s / 4,
    }
    .apply(&d3)?;
    let c2 = cat(&u3, &s2);
    let d2 = relu(layer(5, &c2, None)?);
    let u2 = Upsample2 {
        channels: w2,
        side: s / 2,
    }
    .apply(&d2)?;
    let c1 = cat(&u2, &s1);
    let d1 = relu(layer(6, &c1, None)?);
    let out = layer(7, &d1, None)?;
    Ok(Cache {
        x: x.to_vec(),
        s1,
        p1,
        s2,
        p2,
        s3,
        m,
        c3,
        d3,
        c2,
        d2,
        c1,
        d1,
        out,
    })
}

/// Zeroes gradient entries whose forward activation was clipped.
fn mask(grad: &mut [f64], activation: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

struct Backprop<'a> {
    weights: &'a Weights,
    shapes: [ConvShape; 8],
    grads: Vec<Vec<f64>>,
}

impl Backprop<'_> {
    /// Accumulates parameter gradients of conv `layer` and returns `∂L/∂input`.
    fn conv(&mut self, layer: usize, input: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let shape = self.shapes[layer];
        let (w, b) = slot::CONV[layer];
        let (gw, gb) = two_mut(&mut self.grads, w, b);
        shape.backward_params(input, grad_out, gw, gb);
        let mut grad_in = vec![0.0; input.len()];
        shape.backward_input(self.weights.tensor(w), grad_out, &mut grad_in);
        grad_in
    }

    /// Time-projection gradients for encoder `level` from its pre-activation gradient.
    fn time(&mut self, level: usize, grad_pre: &[f64], emb: &[f64]) {
        let plane = grad_pre.len() / self.shapes[level].out_channels;
        let (w, b) = slot::TIME[level];
        let (gw, gb) = two_mut(&mut self.grads, w, b);
        for (c, chunk) in grad_pre.chunks_exact(plane).enumerate() {
            let g: f64 = chunk.iter().sum();
            gb[c] += g;
            for (gwj, e) in gw[c * emb.len()..(c + 1) * emb.len()].iter_mut().zip(emb) {
                *gwj += g * e;
            }
        }
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (left, right) = v.split_at_mut(b);
    (&mut left[a], &mut right[0])
}

/// Loss `mean((ε_θ(x_t, t) − target)²)` and its gradient for every tensor.
pub fn gradients(weights: &Weights, x_t: &[f64], t: usize, target: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut grads: Vec<Vec<f64>> = weights.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    let loss = accumulate_gradients(weights, x_t, t, target, 1.0, &mut grads)?;
    Ok((loss, grads))
}

fn accumulate_gradients(
    weights: &Weights,
    x_t: &[f64],
    t: usize,
    target: &[f64],
    scale: f64,
    grads: &mut Vec<Vec<f64>>,
) -> Result<f64> {
    let cfg = &weights.config;
    check_len("training target", cfg.pixels(), target.len())?;
    let cond = TimeConditioning::new(weights, t);
    let emb = timestep_embedding(t, cfg.time_embed_dim);
    let cache = forward_cached(weights, &cond, x_t)?;
    let n = target.len() as f64;
    let loss = cache.out.iter().zip(target).map(|(o, e)| (o - e).powi(2)).sum::<f64>() / n;

    let (w1, w2, w3) = cfg.widths();
    let s = cfg.image_side;
    let mut bp = Backprop {
        weights,
        shapes: cfg.conv_shapes(),
        grads: std::mem::take(grads),
    };

    let g_out: Vec<f64> = cache
        .out
        .iter()
        .zip(target)
        .map(|(o, e)| scale * 2.0 * (o - e) / n)
        .collect();
    let mut g_d1 = bp.conv(7, &cache.d1, &g_out);
    mask(&mut g_d1, &cache.d1);
    let g_c1 = bp.conv(6, &cache.c1, &g_d1);
    let (g_u2, g_s1_skip) = g_c1.split_at(w2 * s * s);
    let mut g_d2 = vec![0.0; cache.d2.len()];
    Upsample2 {
        channels: w2,
        side: s / 2,
    }
    .backward(g_u2, &mut g_d2);
    mask(&mut g_d2, &cache.d2);
    let g_c2 = bp.conv(5, &cache.c2, &g_d2);
    let (g_u3, g_s2_skip) = g_c2.split_at(w3 * (s / 2) * (s / 2));
    let mut g_d3 = vec![0.0; cache.d3.len()];
    Upsample2 {
        channels: w3,
        side: s / 4,
    }
    .backward(g_u3, &mut g_d3);
    mask(&mut g_d3, &cache.d3);
    let g_c3 = bp.conv(4, &cache.c3, &g_d3);
    let (g_m, g_s3_skip) = g_c3.split_at(cache.m.len());
    let mut g_m = g_m.to_vec();
    mask(&mut g_m, &cache.m);
    let mut g_s3 = bp.conv(3, &cache.s3, &g_m);
    add_into(&mut g_s3, g_s3_skip);
    mask(&mut g_s3, &cache.s3);
    bp.time(2, &g_s3, &emb);
    let g_p2 = bp.conv(2, &cache.p2, &g_s3);
    let mut g_s2 = g_s2_skip.to_vec();
    AvgPool2 {
        channels: w2,
        side: s / 2,
    }
    .backward(&g_p2, &mut g_s2);
    mask(&mut g_s2, &cache.s2);
    bp.time(1, &g_s2, &emb);
    let g_p1 = bp.conv(1, &cache.p1, &g_s2);
    let mut g_s1 = g_s1_skip.to_vec();
    AvgPool2 { channels: w1, side: s }.backward(&g_p1, &mut g_s1);
    mask(&mut g_s1, &cache.s1);
    bp.time(0, &g_s1, &emb);
    bp.conv(0, &cache.x, &g_s1);

    *grads = bp.grads;
    Ok(loss)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// A fixed set of `(x_t, t, ε)` draws for comparing losses across checkpoints.
struct HeldOut {
    samples: Vec<(Vec<f64>, usize, Vec<f64>)>,
}

impl HeldOut {
    fn new(images: &[&Vec<f64>], draws: usize, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Self {
        let mut samples = Vec::new();
        for img in images {
            for _ in 0..draws {
                samples.push(noised_sample(img, schedule, rng));
            }
        }
        Self { samples }
    }

    fn loss(&self, weights: &Weights) -> Result<f64> {
        let mut total = 0.0;
        for (x_t, t, eps) in &self.samples {
            let pred = predict_noise(x_t, *t, weights)?;
            total += pred.iter().zip(eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / eps.len() as f64;
        }
        Ok(total / self.samples.len() as f64)
    }
}

fn noised_sample(x0: &[f64], schedule: &NoiseSchedule, rng: &mut impl Rng) -> (Vec<f64>, usize, Vec<f64>) {
    let t = rng.random_range(1..=schedule.total_steps());
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let (sa, sb) = (schedule.alpha(t).sqrt(), (1.0 - schedule.alpha(t)).sqrt());
    let x_t = x0.iter().zip(&eps).map(|(x, e)| sa * x + sb * e).collect();
    (x_t, t, eps)
}

/// Mean held-out loss over `draws` fixed noise draws per image.
pub fn held_out_loss(
    weights: &Weights,
    images: &[Vec<f64>],
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let refs: Vec<&Vec<f64>> = images.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HeldOut::new(&refs, draws, schedule, &mut rng).loss(weights)
}

/// Trains a freshly initialized network (seeded by `cfg.seed`).
pub fn train(
    dataset: &[Vec<f64>],
    config: UNetConfig,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_from(dataset, Weights::init(config, cfg.seed)?, schedule, cfg)
}

/// Trains `init` on `dataset` with `t ~ U{1..T}` and `ε ~ N(0, I)` per sample.
pub fn train_from(
    dataset: &[Vec<f64>],
    init: Weights,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    init.validate()?;
    let n = init.config.pixels();
    for img in dataset {
        check_len("training image", n, img.len())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let holdout_count = if dataset.len() == 1 {
        0
    } else {
        ((dataset.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, dataset.len() - 1)
    };
    let (train_set, holdout_set) = dataset.split_at(dataset.len() - holdout_count);
    // A single image is both the training and the held-out set.
    let holdout_refs: Vec<&Vec<f64>> = if holdout_set.is_empty() {
        train_set.iter().collect()
    } else {
        holdout_set.iter().collect()
    };
    let held_out = HeldOut::new(&holdout_refs, cfg.holdout_draws.max(1), schedule, &mut rng);

    let mut weights = init;
    let mut last_finite = weights.clone();
    let initial_holdout_loss = held_out.loss(&weights)?;
    let mut velocity: Vec<Vec<f64>> = weights.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    let mut loss_history = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.steps {
        let mut grads: Vec<Vec<f64>> = weights.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let img = &train_set[rng.random_range(0..train_set.len())];
            let (x_t, t, eps) = noised_sample(img, schedule, &mut rng);
            batch_loss += scale * accumulate_gradients(&weights, &x_t, t, &eps, scale, &mut grads)?;
        }
        if !batch_loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                checkpoint: Box::new(last_finite),
            });
        }
        last_finite.clone_from(&weights);
        loss_history.push(batch_loss);
        for ((tensor, v), g) in weights.tensors.iter_mut().zip(&mut velocity).zip(&grads) {
            for ((w, vi), gi) in tensor.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
                *w += *vi;
            }
        }
    }

    let final_holdout_loss = held_out.loss(&weights)?;
    Ok(TrainOutcome {
        weights,
        initial_holdout_loss,
        final_holdout_loss,
        loss_history,
    })
}
