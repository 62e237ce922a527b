//! A small piecewise-linear U-Net noise predictor.
//!
//! Three resolution levels with widths `(w1, w2, w3)`:
//!
//! ```text
//! encoder  x → conv+t₁ → relu = s1 → pool → conv+t₂ → relu = s2 → pool → conv+t₃ → relu = s3
//! middle   s3 → conv → relu = m
//! decoder  [m, s3] → conv → relu → up → [·, s2] → conv → relu → up → [·, s1] → conv → relu → conv
//! ```
//!
//! The only nonlinearity is ReLU. Time enters as a per-channel bias on the
//! first convolution of each encoder level, computed from a sinusoidal
//! embedding of `t` through a linear map, so it never depends on the image.

mod layers;
mod train;

use serde::{Deserialize, Serialize};

pub use layers::{AvgPool2, Conv2d, ConvShape, Upsample2};
pub use train::{gradients, held_out_loss, train, train_from, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};
use crate::propagate::{Along, Concrete, Selector};
use crate::pwl::{check_len, AffineVector, FixedInterval};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_side: usize,
    pub channel_widths: Vec<usize>,
    pub kernel_size: usize,
    pub time_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_side: 8,
            channel_widths: vec![8, 16, 32],
            kernel_size: 3,
            time_embed_dim: 16,
        }
    }
}

pub const LEVELS: usize = 3;

impl UNetConfig {
    pub fn with_side(image_side: usize) -> Self {
        Self {
            image_side,
            ..Self::default()
        }
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.channel_widths.len() != LEVELS {
            return fail(format!(
                "expected {LEVELS} channel widths, got {}",
                self.channel_widths.len()
            ));
        }
        if self.channel_widths.contains(&0) {
            return fail("channel widths must be positive".into());
        }
        let div = 1 << (LEVELS - 1);
        if self.image_side == 0 || !self.image_side.is_multiple_of(div) {
            return fail(format!("image side {} not divisible by {div}", self.image_side));
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return fail(format!(
                "time embedding dim {} must be even and positive",
                self.time_embed_dim
            ));
        }
        Ok(())
    }

    fn widths(&self) -> (usize, usize, usize) {
        (self.channel_widths[0], self.channel_widths[1], self.channel_widths[2])
    }

    /// Convolution shapes in tensor order: enc1, enc2, enc3, mid, dec3, dec2, dec1, out.
    pub(crate) fn conv_shapes(&self) -> [ConvShape; 8] {
        let (w1, w2, w3) = self.widths();
        let s = self.image_side;
        let k = self.kernel_size;
        let c = |in_channels, out_channels, side| ConvShape {
            in_channels,
            out_channels,
            kernel: k,
            side,
        };
        [
            c(1, w1, s),
            c(w1, w2, s / 2),
            c(w2, w3, s / 4),
            c(w3, w3, s / 4),
            c(2 * w3, w3, s / 4),
            c(w3 + w2, w2, s / 2),
            c(w2 + w1, w1, s),
            c(w1, 1, s),
        ]
    }

    /// Names and shapes of every weight tensor, in storage order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let names = ["enc1", "enc2", "enc3", "mid", "dec3", "dec2", "dec1", "out"];
        let mut specs = Vec::new();
        for (idx, (name, shape)) in names.iter().zip(self.conv_shapes()).enumerate() {
            specs.push((
                format!("{name}.weight"),
                vec![shape.out_channels, shape.in_channels, shape.kernel, shape.kernel],
            ));
            specs.push((format!("{name}.bias"), vec![shape.out_channels]));
            if idx < LEVELS {
                specs.push((
                    format!("time{}.weight", idx + 1),
                    vec![shape.out_channels, self.time_embed_dim],
                ));
                specs.push((format!("time{}.bias", idx + 1), vec![shape.out_channels]));
            }
        }
        specs
    }
}

/// Tensor indices in [`UNetConfig::tensor_specs`] order.
pub(crate) mod slot {
    /// (weight, bias) for each conv, in the order of `conv_shapes`.
    pub const CONV: [(usize, usize); 8] = [(0, 1), (4, 5), (8, 9), (12, 13), (14, 15), (16, 17), (18, 19), (20, 21)];
    /// (weight, bias) of the time projection for each encoder level.
    pub const TIME: [(usize, usize); 3] = [(2, 3), (6, 7), (10, 11)];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub config: UNetConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Weights {
    pub fn zeros(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .tensor_specs()
            .into_iter()
            .map(|(name, shape)| NamedTensor {
                data: vec![0.0; shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Uniform in `±1/√fan_in`, seeded.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        let mut weights = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = weights.config.conv_shapes();
        let embed = weights.config.time_embed_dim;
        for (layer, &(w, b)) in slot::CONV.iter().enumerate() {
            let fan_in = shapes[layer].in_channels * shapes[layer].kernel * shapes[layer].kernel;
            weights.fill_uniform(w, fan_in, &mut rng);
            weights.fill_uniform(b, fan_in, &mut rng);
        }
        for &(w, b) in &slot::TIME {
            weights.fill_uniform(w, embed, &mut rng);
            weights.fill_uniform(b, embed, &mut rng);
        }
        Ok(weights)
    }

    fn fill_uniform(&mut self, idx: usize, fan_in: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut self.tensors[idx].data {
            *v = rng.random_range(-bound..bound);
        }
    }

    pub fn tensor(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Checks names, shapes and finiteness against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.tensor_specs();
        check_len("weight tensor count", specs.len(), self.tensors.len())?;
        for ((name, shape), tensor) in specs.iter().zip(&self.tensors) {
            if &tensor.name != name || &tensor.shape != shape {
                return Err(Error::InvalidArgument(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    tensor.name, tensor.shape
                )));
            }
            check_len("weight tensor data", shape.iter().product(), tensor.data.len())?;
            if tensor.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("tensor {name} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let weights: Self = serde_json::from_str(text)?;
        weights.validate()?;
        Ok(weights)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Sinusoidal embedding of a timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut emb = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        emb[k] = arg.sin();
        emb[half + k] = arg.cos();
    }
    emb
}

/// Per-level channel biases for one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeConditioning {
    pub t: usize,
    pub level_bias: [Vec<f64>; LEVELS],
}

impl TimeConditioning {
    pub fn new(weights: &Weights, t: usize) -> Self {
        let emb = timestep_embedding(t, weights.config.time_embed_dim);
        let level_bias = slot::TIME.map(|(w, b)| {
            let bias = weights.tensor(b);
            weights
                .tensor(w)
                .chunks_exact(emb.len())
                .zip(bias)
                .map(|(row, b0)| b0 + row.iter().zip(&emb).map(|(a, e)| a * e).sum::<f64>())
                .collect()
        });
        Self { t, level_bias }
    }
}

fn conv<'a>(weights: &'a Weights, layer: usize, extra_bias: Option<&'a [f64]>) -> Conv2d<'a> {
    let (w, b) = slot::CONV[layer];
    Conv2d {
        shape: weights.config.conv_shapes()[layer],
        weight: weights.tensor(w),
        bias: weights.tensor(b),
        extra_bias,
    }
}

/// The network, written once for any [`Selector`].
pub fn forward<S: Selector>(sel: &mut S, weights: &Weights, cond: &TimeConditioning, x: &S::Value) -> Result<S::Value> {
    let cfg = &weights.config;
    check_len("noise predictor input", cfg.pixels(), S::len(x))?;
    let (w1, w2, w3) = cfg.widths();
    let s = cfg.image_side;

    let mut s1 = sel.linear(&conv(weights, 0, Some(&cond.level_bias[0])), x)?;
    sel.relu(&mut s1);
    let p1 = sel.linear(&AvgPool2 { channels: w1, side: s }, &s1)?;
    let mut s2 = sel.linear(&conv(weights, 1, Some(&cond.level_bias[1])), &p1)?;
    sel.relu(&mut s2);
    let p2 = sel.linear(
        &AvgPool2 {
            channels: w2,
            side: s / 2,
        },
        &s2,
    )?;
    let mut s3 = sel.linear(&conv(weights, 2, Some(&cond.level_bias[2])), &p2)?;
    sel.relu(&mut s3);
    let mut m = sel.linear(&conv(weights, 3, None), &s3)?;
    sel.relu(&mut m);

    let c3 = sel.concat(&m, &s3);
    let mut d3 = sel.linear(&conv(weights, 4, None), &c3)?;
    sel.relu(&mut d3);
    let u3 = sel.linear(
        &Upsample2 {
            channels: w3,
            side: s / 4,
        },
        &d3,
    )?;
    let c2 = sel.concat(&u3, &s2);
    let mut d2 = sel.linear(&conv(weights, 5, None), &c2)?;
    sel.relu(&mut d2);
    let u2 = sel.linear(
        &Upsample2 {
            channels: w2,
            side: s / 2,
        },
        &d2,
    )?;
    let c1 = sel.concat(&u2, &s1);
    let mut d1 = sel.linear(&conv(weights, 6, None), &c1)?;
    sel.relu(&mut d1);
    sel.linear(&conv(weights, 7, None), &d1)
}

/// `ε_θ(x_t, t)`.
pub fn predict_noise(x_t: &[f64], t: usize, weights: &Weights) -> Result<Vec<f64>> {
    let cond = TimeConditioning::new(weights, t);
    forward(&mut Concrete, weights, &cond, &x_t.to_vec())
}

/// `ε_θ` along a line, with the interval on which its ReLU pattern is fixed.
pub fn predict_noise_affine(
    line: &AffineVector,
    t: usize,
    anchor_z: f64,
    current: FixedInterval,
    weights: &Weights,
) -> Result<(AffineVector, FixedInterval)> {
    let cond = TimeConditioning::new(weights, t);
    let mut along = Along::new(anchor_z, current)?;
    let out = forward(&mut along, weights, &cond, line)?;
    Ok((out, along.interval()))
}
