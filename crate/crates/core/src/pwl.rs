//! Exact propagation of a line `a + b·z` through piecewise-linear maps.
//!
//! Every value flowing through the pipeline is an [`AffineVector`]: a pair
//! `(constant, coefficient)` whose evaluation at `z` is `constant + coefficient·z`.
//! Linear operators act on both parts (offsets only on the constant). Selection
//! primitives (ReLU, absolute value, threshold comparison) fix the branch taken
//! at an anchor `z₀` and shrink a [`FixedInterval`] to the set of `z` on which
//! that branch stays valid. The interval always contains the anchor.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaps smaller than this are closed when intervals are merged.
pub const MERGE_TOLERANCE: f64 = 1e-9;

/// Intervals narrower than this are reported as degenerate.
pub const WIDTH_TOLERANCE: f64 = 1e-12;

/// A vector-valued affine function of the scalar `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineVector {
    constant: Vec<f64>,
    coefficient: Vec<f64>,
}

impl AffineVector {
    pub fn new(constant: Vec<f64>, coefficient: Vec<f64>) -> Result<Self> {
        if constant.len() != coefficient.len() {
            return Err(Error::Shape {
                context: "affine vector",
                expected: constant.len(),
                actual: coefficient.len(),
            });
        }
        Ok(Self { constant, coefficient })
    }

    /// A line that does not move with `z`.
    pub fn constant_line(constant: Vec<f64>) -> Self {
        let coefficient = vec![0.0; constant.len()];
        Self { constant, coefficient }
    }

    pub fn len(&self) -> usize {
        self.constant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constant.is_empty()
    }

    pub fn constant(&self) -> &[f64] {
        &self.constant
    }

    pub fn coefficient(&self) -> &[f64] {
        &self.coefficient
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.constant, self.coefficient)
    }

    pub fn eval(&self, z: f64) -> Vec<f64> {
        self.constant
            .iter()
            .zip(&self.coefficient)
            .map(|(c, d)| c + d * z)
            .collect()
    }

    /// The sub-line made of coordinates `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            constant: self.constant[start..end].to_vec(),
            coefficient: self.coefficient[start..end].to_vec(),
        }
    }

    pub fn map_linear(&self, op: &(impl LinearOp + ?Sized)) -> Result<Self> {
        affine_linear(op, self)
    }

    /// `alpha·x + beta·y`, coordinatewise.
    pub fn axpby(alpha: f64, x: &Self, beta: f64, y: &Self) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Shape {
                context: "affine combination",
                expected: x.len(),
                actual: y.len(),
            });
        }
        let comb = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(a, b)| alpha * a + beta * b).collect() };
        Ok(Self {
            constant: comb(&x.constant, &y.constant),
            coefficient: comb(&x.coefficient, &y.coefficient),
        })
    }

    /// Adds a `z`-independent offset to the constant part.
    pub fn add_offset(&mut self, offset: &[f64]) -> Result<()> {
        if offset.len() != self.len() {
            return Err(Error::Shape {
                context: "affine offset",
                expected: self.len(),
                actual: offset.len(),
            });
        }
        for (c, o) in self.constant.iter_mut().zip(offset) {
            *c += o;
        }
        Ok(())
    }

    /// Stacks `self` on top of `other`.
    pub fn concat(&self, other: &Self) -> Self {
        let mut constant = Vec::with_capacity(self.len() + other.len());
        constant.extend_from_slice(&self.constant);
        constant.extend_from_slice(&other.constant);
        let mut coefficient = Vec::with_capacity(constant.capacity());
        coefficient.extend_from_slice(&self.coefficient);
        coefficient.extend_from_slice(&other.coefficient);
        Self { constant, coefficient }
    }
}

/// A linear (plus constant offset) map between flat real vectors.
///
/// `apply_linear` must be linear; `add_offset` adds the constant part. When a
/// line is propagated the offset only ever touches the constant half.
pub trait LinearOp {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    /// Writes `M·input` into `output` (overwriting it).
    fn apply_linear(&self, input: &[f64], output: &mut [f64]);
    fn add_offset(&self, _output: &mut [f64]) {}

    /// `apply_linear` on two inputs at once; operators may share work between them.
    fn apply_linear_pair(&self, first: &[f64], second: &[f64], out_first: &mut [f64], out_second: &mut [f64]) {
        self.apply_linear(first, out_first);
        self.apply_linear(second, out_second);
    }

    /// Full concrete evaluation `M·input + offset`.
    fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("linear operator input", self.input_len(), input.len())?;
        let mut out = vec![0.0; self.output_len()];
        self.apply_linear(input, &mut out);
        self.add_offset(&mut out);
        Ok(out)
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

pub struct Identity(pub usize);

impl LinearOp for Identity {
    fn input_len(&self) -> usize {
        self.0
    }
    fn output_len(&self) -> usize {
        self.0
    }
    fn apply_linear(&self, input: &[f64], output: &mut [f64]) {
        output.copy_from_slice(input);
    }
}

/// `scale·x + shift`, with an optional per-coordinate shift.
pub struct ScaleShift {
    pub len: usize,
    pub scale: f64,
    pub shift: Option<Vec<f64>>,
}

impl LinearOp for ScaleShift {
    fn input_len(&self) -> usize {
        self.len
    }
    fn output_len(&self) -> usize {
        self.len
    }
    fn apply_linear(&self, input: &[f64], output: &mut [f64]) {
        for (o, i) in output.iter_mut().zip(input) {
            *o = self.scale * i;
        }
    }
    fn add_offset(&self, output: &mut [f64]) {
        if let Some(shift) = &self.shift {
            for (o, s) in output.iter_mut().zip(shift) {
                *o += s;
            }
        }
    }
}

/// Row-major dense matrix with optional offset.
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub offset: Option<Vec<f64>>,
}

impl LinearOp for DenseMatrix {
    fn input_len(&self) -> usize {
        self.cols
    }
    fn output_len(&self) -> usize {
        self.rows
    }
    fn apply_linear(&self, input: &[f64], output: &mut [f64]) {
        for (row, o) in self.data.chunks_exact(self.cols).zip(output.iter_mut()) {
            *o = row.iter().zip(input).map(|(a, b)| a * b).sum();
        }
    }
    fn add_offset(&self, output: &mut [f64]) {
        if let Some(offset) = &self.offset {
            for (o, s) in output.iter_mut().zip(offset) {
                *o += s;
            }
        }
    }
}

/// Propagates a line through a linear operator: `(M·c + offset, M·d)`.
pub fn affine_linear(op: &(impl LinearOp + ?Sized), input: &AffineVector) -> Result<AffineVector> {
    check_len("linear operator input", op.input_len(), input.len())?;
    let mut constant = vec![0.0; op.output_len()];
    let mut coefficient = vec![0.0; op.output_len()];
    op.apply_linear_pair(&input.constant, &input.coefficient, &mut constant, &mut coefficient);
    op.add_offset(&mut constant);
    Ok(AffineVector { constant, coefficient })
}

/// A closed interval with possibly infinite endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedInterval {
    pub lo: f64,
    pub hi: f64,
}

impl FixedInterval {
    pub const REAL_LINE: Self = Self {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "interval [{lo}, {hi}] is reversed");
        Self { lo, hi }
    }

    pub fn contains(&self, z: f64) -> bool {
        self.lo <= z && z <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() < WIDTH_TOLERANCE
    }

    pub fn intersect(&self, other: &Self) -> Option<Self> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Self { lo, hi })
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }

    /// Keeps only the `z` with `sign·(constant + slope·z) ≥ 0`, where `sign`
    /// is the branch observed at `anchor`. A zero slope never constrains.
    ///
    /// The root is clamped so the anchor stays inside: near a boundary the
    /// computed root can land a rounding error on the wrong side of it.
    #[inline]
    pub fn restrict(&mut self, constant: f64, slope: f64, nonneg_at_anchor: bool, anchor: f64) {
        if slope == 0.0 {
            return;
        }
        let root = -constant / slope;
        let lower_bound = (slope > 0.0) == nonneg_at_anchor;
        if lower_bound {
            self.lo = self.lo.max(root.min(anchor));
        } else {
            self.hi = self.hi.min(root.max(anchor));
        }
    }
}

impl fmt::Display for FixedInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

fn check_anchor(anchor: f64, current: &FixedInterval) -> Result<()> {
    if !current.contains(anchor) {
        return Err(Error::Consistency(format!(
            "anchor {anchor} outside current interval {current}"
        )));
    }
    Ok(())
}

/// In-place ReLU on a line; zero at the anchor counts as active.
pub(crate) fn relu_in_place(line: &mut AffineVector, anchor: f64, interval: &mut FixedInterval) {
    for (c, d) in line.constant.iter_mut().zip(line.coefficient.iter_mut()) {
        let active = *c + *d * anchor >= 0.0;
        interval.restrict(*c, *d, active, anchor);
        if !active {
            *c = 0.0;
            *d = 0.0;
        }
    }
}

/// In-place absolute value on a line; zero at the anchor counts as positive.
pub(crate) fn abs_in_place(line: &mut AffineVector, anchor: f64, interval: &mut FixedInterval) {
    for (c, d) in line.constant.iter_mut().zip(line.coefficient.iter_mut()) {
        let positive = *c + *d * anchor >= 0.0;
        interval.restrict(*c, *d, positive, anchor);
        if !positive {
            *c = -*c;
            *d = -*d;
        }
    }
}

pub fn affine_relu(
    input: &AffineVector,
    anchor_z: f64,
    current: FixedInterval,
) -> Result<(AffineVector, FixedInterval)> {
    check_anchor(anchor_z, &current)?;
    let mut out = input.clone();
    let mut interval = current;
    relu_in_place(&mut out, anchor_z, &mut interval);
    Ok((out, interval))
}

pub fn affine_abs(
    input: &AffineVector,
    anchor_z: f64,
    current: FixedInterval,
) -> Result<(AffineVector, FixedInterval)> {
    check_anchor(anchor_z, &current)?;
    let mut out = input.clone();
    let mut interval = current;
    abs_in_place(&mut out, anchor_z, &mut interval);
    Ok((out, interval))
}

/// Thresholds an affine error map at `lambda`.
///
/// Returns the pixels with `error(anchor) ≥ lambda` and the sub-interval of
/// `current` on which every pixel keeps its side of the threshold, in-region
/// and out-of-region pixels alike.
pub fn threshold_interval(
    error_line: &AffineVector,
    lambda: f64,
    anchor_z: f64,
    current: FixedInterval,
) -> Result<(crate::anomaly::AnomalyRegion, FixedInterval)> {
    check_anchor(anchor_z, &current)?;
    let mut interval = current;
    let mut pixels = Vec::new();
    for (i, (c, d)) in error_line.constant.iter().zip(&error_line.coefficient).enumerate() {
        let shifted = c - lambda;
        let inside = shifted + d * anchor_z >= 0.0;
        interval.restrict(shifted, *d, inside, anchor_z);
        if inside {
            pixels.push(i);
        }
    }
    Ok((crate::anomaly::AnomalyRegion::new(pixels, lambda), interval))
}

/// A sorted union of disjoint closed intervals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    intervals: Vec<FixedInterval>,
}

impl IntervalSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn real_line() -> Self {
        Self {
            intervals: vec![FixedInterval::REAL_LINE],
        }
    }

    /// Merges arbitrary intervals, closing gaps narrower than `tolerance`.
    pub fn from_parts(parts: impl IntoIterator<Item = FixedInterval>, tolerance: f64) -> Self {
        let mut parts: Vec<FixedInterval> = parts.into_iter().collect();
        parts.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        let mut intervals: Vec<FixedInterval> = Vec::with_capacity(parts.len());
        for part in parts {
            match intervals.last_mut() {
                Some(last) if part.lo - last.hi < tolerance => {
                    last.hi = last.hi.max(part.hi);
                }
                _ => intervals.push(part),
            }
        }
        Self { intervals }
    }

    pub fn intervals(&self) -> &[FixedInterval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, z: f64) -> bool {
        let idx = self.intervals.partition_point(|iv| iv.hi < z);
        self.intervals.get(idx).is_some_and(|iv| iv.contains(z))
    }

    /// Distance from `z` to the nearest endpoint of any interval.
    pub fn distance_to_boundary(&self, z: f64) -> f64 {
        self.intervals
            .iter()
            .flat_map(|iv| [iv.lo, iv.hi])
            .map(|e| (e - z).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Lebesgue measure; infinite if any interval is unbounded.
    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(FixedInterval::width).sum()
    }

    pub fn intersect_interval(&self, other: &FixedInterval) -> Self {
        Self {
            intervals: self.intervals.iter().filter_map(|iv| iv.intersect(other)).collect(),
        }
    }
}

/// Union of intervals with the default merge tolerance.
pub fn intervals_union(parts: impl IntoIterator<Item = FixedInterval>) -> IntervalSet {
    IntervalSet::from_parts(parts, MERGE_TOLERANCE)
}
