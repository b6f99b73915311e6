//! Scalar abstraction over plain `f64` and tape nodes.
//!
//! The spectrum-to-step mapping (energy centroids, band coordinates,
//! step mixing, anchor penalties) is ordinary scalar math that must run
//! both offline on `f64` and inside the training graph. Writing it once
//! against this trait keeps the two routes byte-for-byte the same
//! formula.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tape::Tv;
use super::tensor::Tensor;

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Constant with the same carrier as `self` (same tape for nodes).
    fn lit(&self, v: f64) -> Self;
    /// Current numeric value; used for data-dependent branching, which
    /// is piecewise and differentiable almost everywhere.
    fn val(&self) -> f64;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn expm1(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powc(self, p: f64) -> Self;
    fn maxc(self, c: f64) -> Self;
    fn minc(self, c: f64) -> Self;
    fn sigmoid(self) -> Self;
    fn tanh(self) -> Self;

    fn clampc(self, lo: f64, hi: f64) -> Self {
        self.maxc(lo).minc(hi)
    }
}

impl Real for f64 {
    fn lit(&self, v: f64) -> Self {
        v
    }
    fn val(&self) -> f64 {
        *self
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn expm1(self) -> Self {
        f64::exp_m1(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn powc(self, p: f64) -> Self {
        self.powf(p)
    }
    fn maxc(self, c: f64) -> Self {
        self.max(c)
    }
    fn minc(self, c: f64) -> Self {
        self.min(c)
    }
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + (-self).exp())
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

impl<'t> Real for Tv<'t> {
    fn lit(&self, v: f64) -> Self {
        self.tape().constant(Tensor::scalar(v))
    }
    fn val(&self) -> f64 {
        self.value()
    }
    fn ln(self) -> Self {
        Tv::ln(self)
    }
    fn exp(self) -> Self {
        Tv::exp(self)
    }
    fn expm1(self) -> Self {
        Tv::expm1(self)
    }
    fn sqrt(self) -> Self {
        Tv::sqrt(self)
    }
    fn abs(self) -> Self {
        Tv::abs(self)
    }
    fn powc(self, p: f64) -> Self {
        Tv::powc(self, p)
    }
    fn maxc(self, c: f64) -> Self {
        Tv::maxc(self, c)
    }
    fn minc(self, c: f64) -> Self {
        Tv::minc(self, c)
    }
    fn sigmoid(self) -> Self {
        Tv::sigmoid(self)
    }
    fn tanh(self) -> Self {
        Tv::tanh(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::tape::Tape;

    fn generic_mix<R: Real>(a: R, b: R, w: f64) -> R {
        a.lit(1.0 - w) * a + a.lit(w) * b
    }

    #[test]
    fn same_formula_both_carriers() {
        let plain = generic_mix(2.0f64, 10.0, 0.3);
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::scalar(10.0));
        let mixed = generic_mix(a, b, 0.3);
        assert!((plain - mixed.value()).abs() < 1e-15);
        tape.backward(mixed).unwrap();
        assert!((a.grad().item() - 0.7).abs() < 1e-15);
        assert!((b.grad().item() - 0.3).abs() < 1e-15);
    }
}
