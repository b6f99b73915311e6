//! Synthetic multiscale time series and decay kernels with known
//! ground truth.
//!
//! Colored noise is synthesized by shaping FFT bin magnitudes exactly
//! to the target piecewise power-law spectrum and randomizing only the
//! phases, so the ground-truth spectrum is exact by construction and
//! fit-recovery tests carry no estimator bias.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::kernel::KernelProfile;
use crate::spectral::{seam_projected_log_amplitudes, PiecewiseFit};

/// Exponent bounds shared across the fitting pipeline.
pub const BETA_MIN: f64 = 0.3;
pub const BETA_MAX: f64 = 5.0;

/// Ground-truth piecewise power-law spectrum for synthesis: K-1 knee
/// frequencies, K exponents, frequency bounds, and an overall
/// amplitude. Frequencies are in cycles per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseSpec {
    pub knees: Vec<f64>,
    pub exponents: Vec<f64>,
    pub f_min: f64,
    pub f_max: f64,
    pub amplitude: f64,
}

impl PiecewiseSpec {
    pub fn new(knees: Vec<f64>, exponents: Vec<f64>, f_min: f64, f_max: f64, amplitude: f64) -> Result<Self> {
        let spec = PiecewiseSpec { knees, exponents, f_min, f_max, amplitude };
        spec.validate()?;
        Ok(spec)
    }

    pub fn segments(&self) -> usize {
        self.exponents.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.exponents.is_empty() {
            return Err(Error::param("spectrum spec needs at least one exponent"));
        }
        if self.knees.len() + 1 != self.exponents.len() {
            return Err(Error::param(format!(
                "got {} knees for {} exponents; expected K-1 knees",
                self.knees.len(),
                self.exponents.len()
            )));
        }
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max <= 0.5) {
            return Err(Error::param(format!(
                "need 0 < f_min < f_max <= 0.5, got [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        let mut prev = self.f_min;
        for &k in &self.knees {
            if k <= prev {
                return Err(Error::param(format!("knees must be strictly increasing inside (f_min, f_max); got {k}")));
            }
            prev = k;
        }
        if prev >= self.f_max {
            return Err(Error::param("last knee must lie below f_max"));
        }
        for &b in &self.exponents {
            if !(BETA_MIN..=BETA_MAX).contains(&b) {
                return Err(Error::param(format!("exponent {b} outside [{BETA_MIN}, {BETA_MAX}]")));
            }
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::param("amplitude must be positive"));
        }
        Ok(())
    }

    /// The continuous (seam-projected) fit this spec defines.
    pub fn to_fit(&self) -> PiecewiseFit {
        let mut fit = PiecewiseFit {
            knees: self.knees.clone(),
            betas: self.exponents.clone(),
            log_amplitudes: vec![0.0; self.exponents.len()],
            f_min: self.f_min,
            f_max: self.f_max,
        };
        fit.log_amplitudes =
            seam_projected_log_amplitudes(self.amplitude.ln(), &fit.knees, &fit.betas);
        fit
    }

    /// Power at frequency `f`; segments extend beyond [f_min, f_max]
    /// so synthesized series have a smooth out-of-band rolloff.
    pub fn power(&self, f: f64) -> f64 {
        let fit = self.to_fit();
        let fc = f.clamp(self.f_min, self.f_max);
        let seg = fit.segment_of(fc);
        (fit.log_amplitudes[seg] - fit.betas[seg] * f.ln()).exp()
    }
}

/// Labels carried by a generated or loaded sequence set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Unlabeled,
    /// One class id per sequence, in `[0, n_classes)`.
    Class { labels: Vec<usize>, n_classes: usize },
    /// One `(horizon, d)` target block per sequence.
    Forecast(Vec<Tensor>),
}

/// A set of N sequences of shape (T, d) with labels and provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledSequenceSet {
    pub sequences: Vec<Tensor>,
    pub labels: Labels,
    /// Seconds (or other physical unit) per sample; the acquisition
    /// unit everything downstream anchors to.
    pub acquisition_step: f64,
    /// Generator parameters for provenance.
    pub metadata: serde_json::Value,
}

impl LabeledSequenceSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences[0].shape[0]
    }

    pub fn channels(&self) -> usize {
        self.sequences[0].shape[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::data("empty sequence set"));
        }
        let (t, d) = self.sequences[0].check_matrix()?;
        if t < 4 || d < 1 {
            return Err(Error::data(format!("sequences need T >= 4 and d >= 1, got ({t}, {d})")));
        }
        for s in &self.sequences {
            let (ti, di) = s.check_matrix()?;
            if (ti, di) != (t, d) {
                return Err(Error::data("ragged sequence set"));
            }
        }
        if !(self.acquisition_step > 0.0) {
            return Err(Error::data("acquisition_step must be positive"));
        }
        match &self.labels {
            Labels::Unlabeled => {}
            Labels::Class { labels, n_classes } => {
                if labels.len() != self.sequences.len() {
                    return Err(Error::data("label count does not match sequence count"));
                }
                if labels.iter().any(|&l| l >= *n_classes) {
                    return Err(Error::data("class label out of range"));
                }
            }
            Labels::Forecast(targets) => {
                if targets.len() != self.sequences.len() {
                    return Err(Error::data("forecast target count does not match sequence count"));
                }
            }
        }
        Ok(())
    }
}

/// Zero-mean/unit-variance per channel, population convention. Constant
/// channels are left at zero.
pub fn standardize_channels(x: &mut Tensor) {
    let (t, d) = (x.rows(), x.cols());
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..t {
            mean += x.at2(i, j);
        }
        mean /= t as f64;
        let mut var = 0.0;
        for i in 0..t {
            let v = x.at2(i, j) - mean;
            var += v * v;
        }
        var /= t as f64;
        let std = var.sqrt();
        let inv = if std > 1e-12 { 1.0 / std } else { 0.0 };
        for i in 0..t {
            let v = (x.at2(i, j) - mean) * inv;
            x.data[i * d + j] = v;
        }
    }
}

/// One channel of length `t` whose periodogram follows `spec` exactly:
/// bin magnitudes are set to sqrt(P(f_k)), phases are uniform with
/// conjugate symmetry, and the result is standardized.
fn colored_channel(spec: &PiecewiseSpec, t: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut bins = vec![Complex::new(0.0, 0.0); t];
    let half = t / 2;
    for k in 1..=half {
        let f = k as f64 / t as f64;
        let mag = spec.power(f).sqrt();
        if k == half && t % 2 == 0 {
            // Nyquist bin must be real; use a random sign.
            let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            bins[k] = Complex::new(s * mag, 0.0);
        } else {
            let phi = rng.gen::<f64>() * std::f64::consts::TAU;
            let c = Complex::new(phi.cos() * mag, phi.sin() * mag);
            bins[k] = c;
            bins[t - k] = c.conj();
        }
    }
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(t);
    ifft.process(&mut bins);
    bins.iter().map(|c| c.re / t as f64).collect()
}

/// Multichannel colored noise whose per-channel PSD follows `spec`.
/// Pure function of `(spec, t, d, seed)`; returned unlabeled.
pub fn gen_colored_noise(spec: &PiecewiseSpec, t: usize, d: usize, seed: u64) -> Result<LabeledSequenceSet> {
    gen_colored_noise_n(spec, 1, t, d, seed)
}

/// Same as [`gen_colored_noise`] but producing `n` sequences.
pub fn gen_colored_noise_n(
    spec: &PiecewiseSpec,
    n: usize,
    t: usize,
    d: usize,
    seed: u64,
) -> Result<LabeledSequenceSet> {
    spec.validate()?;
    if t < 4 {
        return Err(Error::param(format!("need T >= 4, got {t}")));
    }
    if d < 1 || n < 1 {
        return Err(Error::param("need at least one channel and one sequence"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let mut data = vec![0.0; t * d];
        for j in 0..d {
            let ch = colored_channel(spec, t, &mut rng);
            for i in 0..t {
                data[i * d + j] = ch[i];
            }
        }
        let mut x = Tensor::matrix(t, d, data);
        standardize_channels(&mut x);
        sequences.push(x);
    }
    let metadata = serde_json::json!({
        "generator": "colored_noise",
        "spec": spec,
        "t": t, "d": d, "n": n, "seed": seed,
    });
    Ok(LabeledSequenceSet { sequences, labels: Labels::Unlabeled, acquisition_step: 1.0, metadata })
}

/// Parameters for the two-timescale classification task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoTimescaleParams {
    pub slow_band: (f64, f64),
    pub fast_band: (f64, f64),
    /// Amplitude of the class-dependent band-limited component,
    /// relative to the unit-variance background.
    pub signal_amplitude: f64,
    /// Sinusoids mixed into the class component.
    pub n_tones: usize,
    /// Background spectrum; defaults to a single 1/f segment.
    pub background: PiecewiseSpec,
}

impl Default for TwoTimescaleParams {
    fn default() -> Self {
        TwoTimescaleParams {
            slow_band: (0.015, 0.05),
            fast_band: (0.2, 0.35),
            signal_amplitude: 1.2,
            n_tones: 3,
            background: PiecewiseSpec {
                knees: vec![],
                exponents: vec![1.0],
                f_min: 0.004,
                f_max: 0.5,
                amplitude: 1.0,
            },
        }
    }
}

/// Binary task where the two classes differ only by which frequency
/// band carries a class-dependent band-limited sinusoid mixture with
/// per-sequence random phases; both classes share the same broadband
/// background statistics. Labels are balanced: `n_per_class` each.
pub fn gen_two_timescale_task(
    n_per_class: usize,
    t: usize,
    d: usize,
    params: &TwoTimescaleParams,
    seed: u64,
) -> Result<LabeledSequenceSet> {
    let (s0, s1) = params.slow_band;
    let (f0, f1) = params.fast_band;
    for (a, b) in [(s0, s1), (f0, f1)] {
        if !(0.0 < a && a < b && b < 0.5) {
            return Err(Error::param(format!("band ({a}, {b}) must be a sub-interval of (0, 0.5)")));
        }
    }
    if s0 < f1 && f0 < s1 {
        return Err(Error::param("slow and fast bands must be disjoint"));
    }
    if t < 4 {
        return Err(Error::param(format!("need T >= 4, got {t}")));
    }
    params.background.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * n_per_class;
    let mut sequences = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let band = if class == 0 { params.slow_band } else { params.fast_band };
        let mut data = vec![0.0; t * d];
        for j in 0..d {
            let bg = colored_channel(&params.background, t, &mut rng);
            // Class component: tones at random in-band frequencies with
            // random phases, so discrimination must be spectral.
            let mut tone = vec![0.0; t];
            for _ in 0..params.n_tones {
                let f = rng.gen_range(band.0..band.1);
                let phi = rng.gen::<f64>() * std::f64::consts::TAU;
                for (ti, v) in tone.iter_mut().enumerate() {
                    *v += (std::f64::consts::TAU * f * ti as f64 + phi).sin();
                }
            }
            let amp = params.signal_amplitude / (params.n_tones as f64).sqrt();
            for ti in 0..t {
                data[ti * d + j] = bg[ti] + amp * tone[ti];
            }
        }
        let mut x = Tensor::matrix(t, d, data);
        standardize_channels(&mut x);
        sequences.push(x);
        labels.push(class);
    }
    let metadata = serde_json::json!({
        "generator": "two_timescale",
        "params": params,
        "t": t, "d": d, "n_per_class": n_per_class, "seed": seed,
    });
    Ok(LabeledSequenceSet {
        sequences,
        labels: Labels::Class { labels, n_classes: 2 },
        acquisition_step: 1.0,
        metadata,
    })
}

/// Power-law decay kernel `g[l] = (1 + l*dt)^(-alpha)` on `L` samples.
/// Requires `alpha > 1` so the L1 mass is finite.
pub fn powerlaw_kernel(alpha: f64, l: usize, dt: f64) -> Result<KernelProfile> {
    if alpha <= 1.0 {
        return Err(Error::param(format!("power-law kernel needs alpha > 1 (L1 mass diverges), got {alpha}")));
    }
    if l < 1 {
        return Err(Error::param("kernel needs at least one sample"));
    }
    let values = (0..l).map(|i| (1.0 + i as f64 * dt).powf(-alpha)).collect();
    KernelProfile::new(values, dt)
}

/// Exponential-mixture kernel `g[l] = sum_k a_k exp(-rate_k * l * dt)`
/// with simplex weights.
pub fn exp_mixture_kernel(weights: &[f64], rates: &[f64], l: usize, dt: f64) -> Result<KernelProfile> {
    if weights.len() != rates.len() || weights.is_empty() {
        return Err(Error::param("weights and rates must be non-empty and equal length"));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("weights must lie on the simplex (sum 1, nonnegative); sum = {sum}")));
    }
    if rates.iter().any(|&r| r <= 0.0) {
        return Err(Error::param("rates must be positive"));
    }
    let values = (0..l)
        .map(|i| {
            let t = i as f64 * dt;
            weights.iter().zip(rates.iter()).map(|(&a, &r)| a * (-r * t).exp()).sum()
        })
        .collect();
    KernelProfile::new(values, dt)
}
