//! Masking for self-supervised pretraining: independent pointwise
//! drops plus one contiguous per-channel run.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Probability of masking each (t, channel) cell independently.
    pub pointwise_prob: f64,
    /// Fraction of the sequence masked as one contiguous run per
    /// channel.
    pub contiguous_frac: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { pointwise_prob: 0.10, contiguous_frac: 0.30 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pointwise_prob) || !(0.0..=1.0).contains(&self.contiguous_frac) {
            return Err(Error::param("mask probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// (t, d) boolean mask, true where the input is hidden from the model.
pub fn gen_mask(t: usize, d: usize, spec: &MaskSpec, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask = vec![false; t * d];
    for cell in mask.iter_mut() {
        if rng.gen::<f64>() < spec.pointwise_prob {
            *cell = true;
        }
    }
    let run = ((spec.contiguous_frac * t as f64).round() as usize).min(t);
    if run > 0 {
        for j in 0..d {
            let start = rng.gen_range(0..=t - run);
            for i in start..start + run {
                mask[i * d + j] = true;
            }
        }
    }
    mask
}

/// Returns the masked copy (masked cells zeroed; inputs are
/// standardized upstream so zero is the neutral value).
pub fn apply_mask(x: &Tensor, mask: &[bool]) -> Tensor {
    debug_assert_eq!(x.len(), mask.len());
    let data = x.data.iter().zip(mask.iter()).map(|(&v, &m)| if m { 0.0 } else { v }).collect();
    Tensor::new(x.shape.clone(), data)
}

pub fn masked_fraction(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn expected_fraction_matches_union_of_mechanisms() {
        // P(masked) = 1 - (1 - p)(1 - f) with p = 0.1, f = 0.3
        let spec = MaskSpec::default();
        let t = 100;
        let d = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut acc = 0.0;
        let trials = 10_000;
        for _ in 0..trials {
            let m = gen_mask(t, d, &spec, &mut rng);
            acc += masked_fraction(&m);
        }
        let expected = 1.0 - (1.0 - 0.10) * (1.0 - 0.30);
        let got = acc / trials as f64;
        assert!((got - expected).abs() < 0.005, "got {got}, expected {expected}");
    }

    #[test]
    fn contiguous_run_present_per_channel() {
        let spec = MaskSpec { pointwise_prob: 0.0, contiguous_frac: 0.25 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, d) = (40, 3);
        let m = gen_mask(t, d, &spec, &mut rng);
        for j in 0..d {
            let col: Vec<bool> = (0..t).map(|i| m[i * d + j]).collect();
            let count = col.iter().filter(|&&x| x).count();
            assert_eq!(count, 10);
            let first = col.iter().position(|&x| x).unwrap();
            assert!(col[first..first + 10].iter().all(|&x| x));
        }
    }

    #[test]
    fn masked_cells_are_zeroed_and_others_untouched() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mask = vec![true, false, false, true, false, false];
        let y = apply_mask(&x, &mask);
        assert_eq!(y.data, vec![0.0, 2.0, 3.0, 0.0, 5.0, 6.0]);
    }
}
