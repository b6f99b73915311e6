//! Trainable spectrum-to-fit network.
//!
//! A small feed-forward net maps standardized log-binned log-power
//! features to K-1 knee logits and K exponent logits. The output
//! parameterization makes every fit valid by construction: knees come
//! from a floored softmax partition of the log-frequency axis (ordered,
//! strictly interior), exponents from a bounded squashing into
//! [0.3, 5.0]. Amplitudes are derived from the spectrum itself.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fill_log_amplitudes, PiecewiseFit, Spectrum};
use crate::engine::{Real, Tape, Tensor, Tv};
use crate::error::{Error, Result};
use crate::signalgen::{BETA_MAX, BETA_MIN};

/// Minimum relative width of a knee partition cell, as a fraction of
/// the log-frequency range. Keeps knees strictly ordered in floating
/// point even for saturated logits.
const WIDTH_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperNetParams {
    pub k: usize,
    pub n_features: usize,
    pub hidden: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Tape-bound view of the hypernet parameters.
pub struct HyperNetVars<'t> {
    pub k: usize,
    pub n_features: usize,
    pub w1: Tv<'t>,
    pub b1: Tv<'t>,
    pub w2: Tv<'t>,
    pub b2: Tv<'t>,
    pub w_out: Tv<'t>,
    pub b_out: Tv<'t>,
}

impl HyperNetParams {
    /// Two hidden tanh layers of `hidden` units; Xavier-uniform
    /// weights, zero biases (equal knee partition, mid-range betas).
    pub fn init(k: usize, n_features: usize, hidden: usize, seed: u64) -> Self {
        assert!(k >= 1 && n_features >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_dim = 2 * k - 1;
        let mut mk = |rows: usize, cols: usize| {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect())
        };
        HyperNetParams {
            k,
            n_features,
            hidden,
            w1: mk(n_features, hidden),
            b1: Tensor::zeros(&[hidden]),
            w2: mk(hidden, hidden),
            b2: Tensor::zeros(&[hidden]),
            w_out: mk(hidden, out_dim),
            b_out: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn tensor_names() -> [&'static str; 6] {
        ["hypernet.w1", "hypernet.b1", "hypernet.w2", "hypernet.b2", "hypernet.w_out", "hypernet.b_out"]
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w_out, &mut self.b_out]
    }

    /// Binds parameters onto a tape, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> HyperNetVars<'t> {
        let put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        HyperNetVars {
            k: self.k,
            n_features: self.n_features,
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
            w_out: put(&self.w_out),
            b_out: put(&self.b_out),
        }
    }
}

impl<'t> HyperNetVars<'t> {
    /// Leaves in [`HyperNetParams::tensors`] order.
    pub fn leaves(&self) -> Vec<Tv<'t>> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w_out, self.b_out]
    }
}

/// Standardized log-binned log-power features: mean log power over
/// `n_features` log-spaced frequency cells, empty cells carried from
/// their nearest filled neighbor, then standardized to zero mean and
/// unit variance across the feature vector.
pub fn spectral_features(spectrum: &Spectrum, n_features: usize) -> Vec<f64> {
    let l0 = spectrum.f_min.ln();
    let l1 = spectrum.f_max.ln();
    let log_p = spectrum.log_power();
    let mut sums = vec![0.0; n_features];
    let mut counts = vec![0usize; n_features];
    for (i, &f) in spectrum.freqs.iter().enumerate() {
        let pos = (f.ln() - l0) / (l1 - l0);
        let cell = ((pos * n_features as f64).floor() as isize).clamp(0, n_features as isize - 1) as usize;
        sums[cell] += log_p[i];
        counts[cell] += 1;
    }
    let mut feats = vec![f64::NAN; n_features];
    for j in 0..n_features {
        if counts[j] > 0 {
            feats[j] = sums[j] / counts[j] as f64;
        }
    }
    // fill gaps from the left, then from the right for leading gaps
    let mut last = None;
    for j in 0..n_features {
        if feats[j].is_nan() {
            if let Some(v) = last {
                feats[j] = v;
            }
        } else {
            last = Some(feats[j]);
        }
    }
    let mut next = None;
    for j in (0..n_features).rev() {
        if feats[j].is_nan() {
            if let Some(v) = next {
                feats[j] = v;
            }
        } else {
            next = Some(feats[j]);
        }
    }
    let mean = feats.iter().sum::<f64>() / n_features as f64;
    let var = feats.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_features as f64;
    let inv = 1.0 / var.sqrt().max(1e-9);
    feats.iter().map(|v| (v - mean) * inv).collect()
}

/// Differentiable forward pass producing a valid fit on the tape.
pub fn hypernet_forward_on<'t>(
    tape: &'t Tape,
    vars: &HyperNetVars<'t>,
    spectrum: &Spectrum,
) -> PiecewiseFit<Tv<'t>> {
    let k = vars.k;
    let feats = spectral_features(spectrum, vars.n_features);
    let x = tape.constant(Tensor::matrix(1, vars.n_features, feats));
    let h1 = x.matmul(vars.w1).add_row(vars.b1).tanh();
    let h2 = h1.matmul(vars.w2).add_row(vars.b2).tanh();
    let out = h2.matmul(vars.w_out).add_row(vars.b_out);

    // Knees: floored softmax over K width logits (the last logit is a
    // fixed zero), cumulated along the log-frequency axis.
    let mut knees: Vec<Tv<'t>> = Vec::with_capacity(k - 1);
    if k > 1 {
        let logits: Vec<Tv<'t>> = (0..k - 1).map(|i| out.index(i)).collect();
        // constant shift for stability; softmax is shift-invariant
        let shift = logits.iter().map(|l| l.value()).fold(0.0_f64, f64::max);
        let mut exps: Vec<Tv<'t>> = logits.iter().map(|l| (*l - l.lit(shift)).exp()).collect();
        exps.push(tape.scalar((-shift).exp()));
        let mut z = exps[0];
        for e in &exps[1..] {
            z = z + *e;
        }
        let l0 = spectrum.f_min.ln();
        let l1 = spectrum.f_max.ln();
        let norm = 1.0 + k as f64 * WIDTH_FLOOR;
        let mut cum = tape.scalar(0.0);
        for e in exps.iter().take(k - 1) {
            let w = (*e / z + e.lit(WIDTH_FLOOR)) * e.lit(1.0 / norm);
            cum = cum + w;
            let log_knee = cum.lit(l0) + cum * cum.lit(l1 - l0);
            knees.push(log_knee.exp());
        }
    }

    // Betas: bounded squashing into [BETA_MIN, BETA_MAX].
    let betas: Vec<Tv<'t>> = (0..k)
        .map(|i| {
            let logit = out.index(k - 1 + i);
            logit.sigmoid() * logit.lit(BETA_MAX - BETA_MIN) + logit.lit(BETA_MIN)
        })
        .collect();

    let log_amplitudes = fill_log_amplitudes(&knees, &betas, spectrum);
    PiecewiseFit { knees, betas, log_amplitudes, f_min: spectrum.f_min, f_max: spectrum.f_max }
}

/// Value-level forward pass (scratch tape under the hood, so the
/// formula is shared with the differentiable route).
pub fn hypernet_forward(params: &HyperNetParams, spectrum: &Spectrum) -> Result<PiecewiseFit<f64>> {
    spectrum.validate()?;
    if spectrum.len() < 2 {
        return Err(Error::param("spectrum too short for feature binning"));
    }
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    Ok(hypernet_forward_on(&tape, &vars, spectrum).detach())
}
