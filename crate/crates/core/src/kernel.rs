//! Discretely sampled temporal kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A temporal kernel g sampled on a uniform lag grid `0, dt, 2·dt, …`
/// in acquisition units. The explicit step makes L1 norms well-defined
/// Riemann sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelProfile {
    pub values: Vec<f64>,
    pub dt: f64,
}

impl KernelProfile {
    pub fn new(values: Vec<f64>, dt: f64) -> Result<Self> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::param(format!("kernel grid step must be positive, got {dt}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("kernel profile contains non-finite values"));
        }
        Ok(KernelProfile { values, dt })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Riemann-sum L1 mass: `sum |g[l]| * dt`.
    pub fn l1_mass(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.dt
    }

    /// Lag of sample `l` in acquisition units.
    pub fn lag(&self, l: usize) -> f64 {
        l as f64 * self.dt
    }

    /// Linear interpolation at an arbitrary lag; zero beyond the grid.
    pub fn sample_at(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let x = t / self.dt;
        let i = x.floor() as usize;
        if i + 1 >= self.values.len() {
            return if i < self.values.len() { self.values[i] } else { 0.0 };
        }
        let frac = x - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
}
