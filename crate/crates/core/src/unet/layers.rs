//! Square-image tensor kernels in channel-major layout `[channel][row][col]`.
//!
//! Convolutions use zero padding and keep the spatial size. Pooling averages
//! 2×2 blocks; upsampling replicates each pixel into a 2×2 block.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::pwl::LinearOp;

const PAD: u32 = u32::MAX;

/// Gather tables keyed by `(in_channels, kernel, side)`.
type GatherCache = HashMap<(usize, usize, usize), Rc<Vec<u32>>>;

thread_local! {
    static GATHER_TABLES: RefCell<GatherCache> = RefCell::new(HashMap::new());
}

/// `Σ aᵢbᵢ` with independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `(Σ wᵢaᵢ, Σ wᵢbᵢ)` in one pass over `w`.
#[inline]
fn dot2(w: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut acc_a = [0.0; 4];
    let mut acc_b = [0.0; 4];
    let (cw, ca, cb) = (w.chunks_exact(4), a.chunks_exact(4), b.chunks_exact(4));
    let mut tail = (0.0, 0.0);
    for ((x, y), z) in cw.remainder().iter().zip(ca.remainder()).zip(cb.remainder()) {
        tail.0 += x * y;
        tail.1 += x * z;
    }
    for ((x, y), z) in cw.zip(ca).zip(cb) {
        for j in 0..4 {
            acc_a[j] += x[j] * y[j];
            acc_b[j] += x[j] * z[j];
        }
    }
    (
        (acc_a[0] + acc_a[1]) + (acc_a[2] + acc_a[3]) + tail.0,
        (acc_b[0] + acc_b[1]) + (acc_b[2] + acc_b[3]) + tail.1,
    )
}

/// `y += alpha·x`.
#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub side: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn plane(&self) -> usize {
        self.side * self.side
    }

    /// Length of one receptive field, matching the weight layout `[i][ky][kx]`.
    fn field(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Calls `f(position, field offset, input index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (s, k) = (self.side as isize, self.kernel as isize);
        let r = k / 2;
        let plane = self.plane();
        for row in 0..s {
            for col in 0..s {
                let p = (row * s + col) as usize;
                for i in 0..self.in_channels {
                    for ky in 0..k {
                        let yy = row + ky - r;
                        if yy < 0 || yy >= s {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = col + kx - r;
                            if xx < 0 || xx >= s {
                                continue;
                            }
                            let j = ((i as isize * k + ky) * k + kx) as usize;
                            f(p, j, i * plane + (yy * s + xx) as usize);
                        }
                    }
                }
            }
        }
    }

    /// For each (position, field offset) the input index, or `PAD`.
    fn gather_table(&self) -> Rc<Vec<u32>> {
        GATHER_TABLES.with(|tables| {
            let key = (self.in_channels, self.kernel, self.side);
            Rc::clone(tables.borrow_mut().entry(key).or_insert_with(|| {
                let field = self.field();
                let mut table = vec![PAD; self.plane() * field];
                self.for_each_tap(|p, j, src| table[p * field + j] = src as u32);
                Rc::new(table)
            }))
        })
    }

    /// Zero-padded receptive fields, one row of `field()` values per position.
    fn patches(&self, x: &[f64]) -> Vec<f64> {
        self.gather_table()
            .iter()
            .map(|&src| if src == PAD { 0.0 } else { x[src as usize] })
            .collect()
    }

    /// `y = W ⋆ x` (no bias). Overwrites `y`.
    pub fn forward(&self, weight: &[f64], x: &[f64], y: &mut [f64]) {
        let (plane, field) = (self.plane(), self.field());
        let patches = self.patches(x);
        for (p, patch) in patches.chunks_exact(field).enumerate() {
            for (o, w) in weight.chunks_exact(field).enumerate() {
                y[o * plane + p] = dot(w, patch);
            }
        }
    }

    /// [`forward`](Self::forward) on two inputs, reading each weight once.
    pub fn forward_pair(&self, weight: &[f64], x1: &[f64], x2: &[f64], y1: &mut [f64], y2: &mut [f64]) {
        let (plane, field) = (self.plane(), self.field());
        let (p1, p2) = (self.patches(x1), self.patches(x2));
        for (p, (patch1, patch2)) in p1.chunks_exact(field).zip(p2.chunks_exact(field)).enumerate() {
            for (o, w) in weight.chunks_exact(field).enumerate() {
                (y1[o * plane + p], y2[o * plane + p]) = dot2(w, patch1, patch2);
            }
        }
    }

    /// Accumulates `∂L/∂x` given `∂L/∂y`.
    pub fn backward_input(&self, weight: &[f64], grad_y: &[f64], grad_x: &mut [f64]) {
        let (plane, field) = (self.plane(), self.field());
        let mut grad_patches = vec![0.0; plane * field];
        for (p, gp) in grad_patches.chunks_exact_mut(field).enumerate() {
            for (o, w) in weight.chunks_exact(field).enumerate() {
                axpy(grad_y[o * plane + p], w, gp);
            }
        }
        for (&src, g) in self.gather_table().iter().zip(&grad_patches) {
            if src != PAD {
                grad_x[src as usize] += g;
            }
        }
    }

    /// Accumulates `∂L/∂W` and `∂L/∂b` given the layer input and `∂L/∂y`.
    pub fn backward_params(&self, x: &[f64], grad_y: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) {
        let (plane, field) = (self.plane(), self.field());
        let patches = self.patches(x);
        for (o, gw) in grad_w.chunks_exact_mut(field).enumerate() {
            for (p, patch) in patches.chunks_exact(field).enumerate() {
                axpy(grad_y[o * plane + p], patch, gw);
            }
        }
        for (o, gb) in grad_b.iter_mut().enumerate().take(self.out_channels) {
            *gb += grad_y[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
    }
}

/// Convolution with per-channel bias, plus an optional second per-channel
/// bias (the time conditioning).
pub struct Conv2d<'a> {
    pub shape: ConvShape,
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub extra_bias: Option<&'a [f64]>,
}

impl LinearOp for Conv2d<'_> {
    fn input_len(&self) -> usize {
        self.shape.in_channels * self.shape.plane()
    }
    fn output_len(&self) -> usize {
        self.shape.out_channels * self.shape.plane()
    }
    fn apply_linear(&self, input: &[f64], output: &mut [f64]) {
        self.shape.forward(self.weight, input, output);
    }
    fn apply_linear_pair(&self, first: &[f64], second: &[f64], out_first: &mut [f64], out_second: &mut [f64]) {
        self.shape
            .forward_pair(self.weight, first, second, out_first, out_second);
    }
    fn add_offset(&self, output: &mut [f64]) {
        let plane = self.shape.plane();
        for (o, chunk) in output.chunks_exact_mut(plane).enumerate() {
            let b = self.bias[o] + self.extra_bias.map_or(0.0, |e| e[o]);
            for v in chunk {
                *v += b;
            }
        }
    }
}

/// 2×2 average pooling; `side` is the input side.
pub struct AvgPool2 {
    pub channels: usize,
    pub side: usize,
}

impl AvgPool2 {
    pub fn backward(&self, grad_y: &[f64], grad_x: &mut [f64]) {
        let s = self.side;
        let h = s / 2;
        for c in 0..self.channels {
            for r in 0..s {
                for col in 0..s {
                    grad_x[c * s * s + r * s + col] += 0.25 * grad_y[c * h * h + (r / 2) * h + col / 2];
                }
            }
        }
    }
}

impl LinearOp for AvgPool2 {
    fn input_len(&self) -> usize {
        self.channels * self.side * self.side
    }
    fn output_len(&self) -> usize {
        let h = self.side / 2;
        self.channels * h * h
    }
    fn apply_linear(&self, input: &[f64], output: &mut [f64]) {
        let s = self.side;
        let h = s / 2;
        for c in 0..self.channels {
            let inp = &input[c * s * s..];
            for r in 0..h {
                for col in 0..h {
                    let a = inp[2 * r * s + 2 * col];
                    let b = inp[2 * r * s + 2 * col + 1];
                    let d = inp[(2 * r + 1) * s + 2 * col];
                    let e = inp[(2 * r + 1) * s + 2 * col + 1];
                    output[c * h * h + r * h + col] = 0.25 * (a + b + d + e);
                }
            }
        }
    }
}

/// Nearest-neighbour 2× upsampling; `side` is the input side.
pub struct Upsample2 {
    pub channels: usize,
    pub side: usize,
}

impl Upsample2 {
    pub fn backward(&self, grad_y: &[f64], grad_x: &mut [f64]) {
        let s = self.side;
        let big = 2 * s;
        for c in 0..self.channels {
            for r in 0..big {
                for col in 0..big {
                    grad_x[c * s * s + (r / 2) * s + col / 2] += grad_y[c * big * big + r * big + col];
                }
            }
        }
    }
}

impl LinearOp for Upsample2 {
    fn input_len(&self) -> usize {
        self.channels * self.side * self.side
    }
    fn output_len(&self) -> usize {
        4 * self.input_len()
    }
    fn apply_linear(&self, input: &[f64], output: &mut [f64]) {
        let s = self.side;
        let big = 2 * s;
        for c in 0..self.channels {
            for r in 0..big {
                for col in 0..big {
                    output[c * big * big + r * big + col] = input[c * s * s + (r / 2) * s + col / 2];
                }
            }
        }
    }
}
