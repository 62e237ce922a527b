//! One pipeline definition, two ways to run it.
//!
//! The U-Net, the reverse sampler and the error map are written once against
//! [`Selector`]. [`Concrete`] evaluates on plain vectors; [`Along`] carries an
//! [`AffineVector`] and narrows the interval of `z` on which every ReLU and
//! absolute-value branch stays fixed.

use crate::error::Result;
use crate::pwl::{self, check_len, AffineVector, FixedInterval, LinearOp};

pub trait Selector {
    type Value: Clone;

    fn len(value: &Self::Value) -> usize;
    fn linear(&mut self, op: &dyn LinearOp, x: &Self::Value) -> Result<Self::Value>;
    /// `alpha·x + beta·y`.
    fn axpby(&mut self, alpha: f64, x: &Self::Value, beta: f64, y: &Self::Value) -> Result<Self::Value>;
    fn add_offset(&mut self, x: &mut Self::Value, offset: &[f64]) -> Result<()>;
    fn concat(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn relu(&mut self, x: &mut Self::Value);
    fn abs(&mut self, x: &mut Self::Value);
}

/// Plain evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Concrete;

impl Selector for Concrete {
    type Value = Vec<f64>;

    fn len(value: &Vec<f64>) -> usize {
        value.len()
    }

    fn linear(&mut self, op: &dyn LinearOp, x: &Vec<f64>) -> Result<Vec<f64>> {
        op.apply(x)
    }

    fn axpby(&mut self, alpha: f64, x: &Vec<f64>, beta: f64, y: &Vec<f64>) -> Result<Vec<f64>> {
        check_len("vector combination", x.len(), y.len())?;
        Ok(x.iter().zip(y).map(|(a, b)| alpha * a + beta * b).collect())
    }

    fn add_offset(&mut self, x: &mut Vec<f64>, offset: &[f64]) -> Result<()> {
        check_len("vector offset", x.len(), offset.len())?;
        for (v, o) in x.iter_mut().zip(offset) {
            *v += o;
        }
        Ok(())
    }

    fn concat(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(a.len() + b.len());
        out.extend_from_slice(a);
        out.extend_from_slice(b);
        out
    }

    fn relu(&mut self, x: &mut Vec<f64>) {
        for v in x.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    fn abs(&mut self, x: &mut Vec<f64>) {
        for v in x.iter_mut() {
            *v = v.abs();
        }
    }
}

/// Propagation along a line, anchored at `anchor`.
#[derive(Clone, Copy, Debug)]
pub struct Along {
    anchor: f64,
    interval: FixedInterval,
}

impl Along {
    pub fn new(anchor: f64, current: FixedInterval) -> Result<Self> {
        if !current.contains(anchor) {
            return Err(crate::Error::Consistency(format!(
                "anchor {anchor} outside current interval {current}"
            )));
        }
        Ok(Self {
            anchor,
            interval: current,
        })
    }

    pub fn anchor(&self) -> f64 {
        self.anchor
    }

    /// The interval on which every selection made so far holds.
    pub fn interval(&self) -> FixedInterval {
        self.interval
    }
}

impl Selector for Along {
    type Value = AffineVector;

    fn len(value: &AffineVector) -> usize {
        value.len()
    }

    fn linear(&mut self, op: &dyn LinearOp, x: &AffineVector) -> Result<AffineVector> {
        pwl::affine_linear(op, x)
    }

    fn axpby(&mut self, alpha: f64, x: &AffineVector, beta: f64, y: &AffineVector) -> Result<AffineVector> {
        AffineVector::axpby(alpha, x, beta, y)
    }

    fn add_offset(&mut self, x: &mut AffineVector, offset: &[f64]) -> Result<()> {
        x.add_offset(offset)
    }

    fn concat(&mut self, a: &AffineVector, b: &AffineVector) -> AffineVector {
        a.concat(b)
    }

    fn relu(&mut self, x: &mut AffineVector) {
        pwl::relu_in_place(x, self.anchor, &mut self.interval);
    }

    fn abs(&mut self, x: &mut AffineVector) {
        pwl::abs_in_place(x, self.anchor, &mut self.interval);
    }
}
