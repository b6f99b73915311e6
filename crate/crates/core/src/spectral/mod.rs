//! Power spectral density estimation, piecewise power-law fitting, and
//! energy-weighted representative frequencies.
//!
//! Two fitting routes exist: an offline exhaustive grid fit
//! ([`init_fit`]) used for initialization and as the alignment teacher,
//! and a trainable hypernet ([`hypernet`]) whose outputs are valid fits
//! by construction. Scalar formulas are generic over [`Real`] so the
//! same code runs offline on `f64` and inside the training graph.

mod hypernet;

pub use hypernet::{hypernet_forward, hypernet_forward_on, spectral_features, HyperNetParams, HyperNetVars};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::engine::Real;
use crate::error::{Error, Result};
use crate::signalgen::{BETA_MIN, BETA_MAX};

/// Threshold below which band integrals switch to their series limit;
/// keeps the centroid exact through the β = 1 and β = 2 crossings.
pub const CENTROID_EPS: f64 = 1e-6;

/// Floor applied before taking logs of periodogram power.
const LOG_POWER_FLOOR: f64 = 1e-300;

/// One channel's power spectrum restricted to an analysis band.
/// Frequencies are cycles per sample, strictly increasing, DC excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub f_min: f64,
    pub f_max: f64,
}

impl Spectrum {
    pub fn validate(&self) -> Result<()> {
        if self.freqs.len() != self.power.len() || self.freqs.is_empty() {
            return Err(Error::data("spectrum needs equal-length, non-empty freqs and power"));
        }
        let mut prev = 0.0;
        for &f in &self.freqs {
            if !(f > prev && f <= 0.5) {
                return Err(Error::data(format!("frequencies must be strictly increasing in (0, 0.5]; got {f}")));
            }
            prev = f;
        }
        if self.power.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::data("power values must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn log_freqs(&self) -> Vec<f64> {
        self.freqs.iter().map(|f| f.ln()).collect()
    }

    pub fn log_power(&self) -> Vec<f64> {
        self.power.iter().map(|p| p.max(LOG_POWER_FLOOR).ln()).collect()
    }
}

/// Magnitude-squared FFT of one channel, restricted to
/// `[f_min, f_max]` with the DC bin removed. Deterministic; no
/// windowing or averaging.
pub fn periodogram(x: &[f64], f_min: f64, f_max: f64) -> Result<Spectrum> {
    let t = x.len();
    if t < 4 {
        return Err(Error::param(format!("periodogram needs T >= 4, got {t}")));
    }
    if !(f_min > 0.0 && f_min < f_max && f_max <= 0.5) {
        return Err(Error::param(format!("need 0 < f_min < f_max <= 0.5, got [{f_min}, {f_max}]")));
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(t).process(&mut buf);
    let mut freqs = Vec::new();
    let mut power = Vec::new();
    for k in 1..=t / 2 {
        let f = k as f64 / t as f64;
        if f >= f_min && f <= f_max {
            freqs.push(f);
            power.push(buf[k].norm_sqr() / t as f64);
        }
    }
    if freqs.is_empty() {
        return Err(Error::param(format!("no FFT bins inside [{f_min}, {f_max}] at T = {t}")));
    }
    Ok(Spectrum { freqs, power, f_min, f_max })
}

/// Per-channel periodograms of a (T, d) sequence.
pub fn periodogram_channels(x: &crate::engine::Tensor, f_min: f64, f_max: f64) -> Result<Vec<Spectrum>> {
    let (t, d) = x.check_matrix()?;
    (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..t).map(|i| x.at2(i, j)).collect();
            periodogram(&col, f_min, f_max)
        })
        .collect()
}

/// Average of per-channel power spectra (geometric mean of power, i.e.
/// arithmetic mean of log power), sharing one frequency grid.
pub fn mean_log_spectrum(spectra: &[Spectrum]) -> Result<Spectrum> {
    if spectra.is_empty() {
        return Err(Error::param("no spectra to average"));
    }
    let n = spectra[0].len();
    for s in spectra {
        if s.len() != n {
            return Err(Error::shape("spectra disagree on frequency grid"));
        }
    }
    let mut power = vec![0.0; n];
    for s in spectra {
        for (acc, lp) in power.iter_mut().zip(s.log_power()) {
            *acc += lp;
        }
    }
    let inv = 1.0 / spectra.len() as f64;
    for p in power.iter_mut() {
        *p = (*p * inv).exp();
    }
    Ok(Spectrum {
        freqs: spectra[0].freqs.clone(),
        power,
        f_min: spectra[0].f_min,
        f_max: spectra[0].f_max,
    })
}

/// A fitted piecewise power law: K-1 knee frequencies, K exponents, and
/// K per-segment log amplitudes (log-log intercepts). Generic over the
/// scalar carrier so hypernet outputs stay on the tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseFit<R = f64> {
    pub knees: Vec<R>,
    pub betas: Vec<R>,
    pub log_amplitudes: Vec<R>,
    pub f_min: f64,
    pub f_max: f64,
}

impl<R: Real> PiecewiseFit<R> {
    pub fn k(&self) -> usize {
        self.betas.len()
    }

    /// Segment edges as plain numbers: `f_min, knees…, f_max`.
    pub fn edge_values(&self) -> Vec<f64> {
        let mut e = Vec::with_capacity(self.k() + 1);
        e.push(self.f_min);
        e.extend(self.knees.iter().map(|k| k.val()));
        e.push(self.f_max);
        e
    }

    /// Index of the left-closed segment containing `f`.
    pub fn segment_of(&self, f: f64) -> usize {
        let edges = self.edge_values();
        for k in 0..self.k() {
            if f < edges[k + 1] {
                return k;
            }
        }
        self.k() - 1
    }

    /// Value-level snapshot (detaches tape nodes).
    pub fn detach(&self) -> PiecewiseFit<f64> {
        PiecewiseFit {
            knees: self.knees.iter().map(|v| v.val()).collect(),
            betas: self.betas.iter().map(|v| v.val()).collect(),
            log_amplitudes: self.log_amplitudes.iter().map(|v| v.val()).collect(),
            f_min: self.f_min,
            f_max: self.f_max,
        }
    }
}

impl PiecewiseFit<f64> {
    pub fn validate(&self) -> Result<()> {
        if self.betas.is_empty() || self.knees.len() + 1 != self.betas.len() || self.log_amplitudes.len() != self.betas.len() {
            return Err(Error::param("fit needs K exponents, K amplitudes, K-1 knees"));
        }
        let mut prev = self.f_min;
        for &k in &self.knees {
            if !(k > prev) {
                return Err(Error::param(format!("knees must be strictly increasing in (f_min, f_max); got {k}")));
            }
            prev = k;
        }
        if prev >= self.f_max {
            return Err(Error::param("last knee must lie below f_max"));
        }
        for &b in &self.betas {
            if !(BETA_MIN - 1e-12..=BETA_MAX + 1e-12).contains(&b) {
                return Err(Error::param(format!("beta {b} outside [{BETA_MIN}, {BETA_MAX}]")));
            }
        }
        Ok(())
    }
}

/// Left-to-right seam projection: keep the first segment's amplitude
/// and re-derive the rest so adjacent segments agree exactly at every
/// knee. `log_c[k+1] = log_c[k] + (beta[k+1] - beta[k]) * ln(knee_k)`.
pub fn seam_projected_log_amplitudes<R: Real>(first_log_amp: R, knees: &[R], betas: &[R]) -> Vec<R> {
    let mut out = Vec::with_capacity(betas.len());
    out.push(first_log_amp);
    for k in 0..knees.len() {
        let prev = out[k];
        let step = (betas[k + 1] - betas[k]) * knees[k].ln();
        out.push(prev + step);
    }
    out
}

/// Applies the seam projection to a fit, making it continuous.
pub fn seam_project<R: Real>(fit: &PiecewiseFit<R>) -> PiecewiseFit<R> {
    PiecewiseFit {
        knees: fit.knees.clone(),
        betas: fit.betas.clone(),
        log_amplitudes: seam_projected_log_amplitudes(fit.log_amplitudes[0], &fit.knees, &fit.betas),
        f_min: fit.f_min,
        f_max: fit.f_max,
    }
}

/// Evaluates the continuous (seam-projected) model at `f`:
/// `c_k * f^(-beta_k)` for the left-closed segment containing `f`.
pub fn eval_piecewise(fit: &PiecewiseFit<f64>, f: f64) -> Result<f64> {
    if !(f >= fit.f_min && f <= fit.f_max) {
        return Err(Error::param(format!("f = {f} outside [{}, {}]", fit.f_min, fit.f_max)));
    }
    let proj = seam_project(fit);
    let k = proj.segment_of(f);
    Ok((proj.log_amplitudes[k] - proj.betas[k] * f.ln()).exp())
}

/// Data-driven per-segment log amplitudes for fixed knees and betas:
/// `log_c_k = mean over segment bins of (ln P + beta_k ln f)`. Empty
/// segments are filled by seam continuity from the nearest fitted
/// neighbor.
pub fn derive_log_amplitudes<R: Real>(knees: &[R], betas: &[R], spectrum: &Spectrum) -> Vec<Option<R>> {
    let k = betas.len();
    let mut edges = Vec::with_capacity(k + 1);
    edges.push(spectrum.f_min);
    edges.extend(knees.iter().map(|v| v.val()));
    edges.push(spectrum.f_max);
    let log_f = spectrum.log_freqs();
    let log_p = spectrum.log_power();
    let mut out: Vec<Option<R>> = vec![None; k];
    for seg in 0..k {
        let mut n = 0usize;
        let (mut sum_lp, mut sum_lf) = (0.0, 0.0);
        for i in 0..spectrum.len() {
            let f = spectrum.freqs[i];
            let inside = f >= edges[seg] && (f < edges[seg + 1] || (seg == k - 1 && f <= edges[seg + 1]));
            if inside {
                n += 1;
                sum_lp += log_p[i];
                sum_lf += log_f[i];
            }
        }
        if n > 0 {
            let inv = 1.0 / n as f64;
            out[seg] = Some(betas[seg].lit(sum_lp * inv) + betas[seg] * betas[seg].lit(sum_lf * inv));
        }
    }
    out
}

/// Amplitudes for a hypernet fit: data-derived where segments have
/// bins, continuity-projected elsewhere.
pub fn fill_log_amplitudes<R: Real>(knees: &[R], betas: &[R], spectrum: &Spectrum) -> Vec<R> {
    let derived = derive_log_amplitudes(knees, betas, spectrum);
    let k = betas.len();
    let first = derived.iter().position(|d| d.is_some()).expect("non-empty spectrum");
    let mut out: Vec<Option<R>> = derived.clone();
    // extend left of the first fitted segment
    for seg in (0..first).rev() {
        let next = out[seg + 1].unwrap();
        out[seg] = Some(next - (betas[seg + 1] - betas[seg]) * knees[seg].ln());
    }
    // extend right across any remaining gaps
    for seg in 1..k {
        if out[seg].is_none() {
            let prev = out[seg - 1].unwrap();
            out[seg] = Some(prev + (betas[seg] - betas[seg - 1]) * knees[seg - 1].ln());
        }
    }
    out.into_iter().map(|d| d.unwrap()).collect()
}

/// Multi-resolution log-domain MAE between the fitted model and the
/// spectrum. Each level smooths both curves identically by averaging
/// log values over local blocks of 1, 2, and 4 bins; levels contribute
/// equally. A model equal to the data is exactly zero at every level.
pub fn fit_loss<R: Real>(fit: &PiecewiseFit<R>, spectrum: &Spectrum) -> R {
    let proto = fit.betas[0];
    let edges = fit.edge_values();
    let log_p = spectrum.log_power();
    let log_f = spectrum.log_freqs();
    let k = fit.k();
    let mut level_losses: Vec<R> = Vec::new();
    for &block in &[1usize, 2, 4] {
        if spectrum.len() < block {
            continue;
        }
        let n_blocks = spectrum.len() / block;
        let mut acc = proto.lit(0.0);
        let mut count = vec![0usize; k];
        let mut sum_lf = vec![0.0; k];
        for b in 0..n_blocks {
            let lo = b * block;
            let hi = lo + block;
            let lp = log_p[lo..hi].iter().sum::<f64>() / block as f64;
            // block-averaged model: bucket member bins per segment
            count.iter_mut().for_each(|c| *c = 0);
            sum_lf.iter_mut().for_each(|s| *s = 0.0);
            for i in lo..hi {
                let seg = segment_of_edges(&edges, spectrum.freqs[i]);
                count[seg] += 1;
                sum_lf[seg] += log_f[i];
            }
            let mut model = proto.lit(0.0);
            for seg in 0..k {
                if count[seg] > 0 {
                    let frac = count[seg] as f64 / block as f64;
                    model = model + fit.log_amplitudes[seg] * proto.lit(frac)
                        - fit.betas[seg] * proto.lit(sum_lf[seg] / block as f64);
                }
            }
            acc = acc + (model - proto.lit(lp)).abs();
        }
        level_losses.push(acc * proto.lit(1.0 / n_blocks as f64));
    }
    let mut total = proto.lit(0.0);
    for l in &level_losses {
        total = total + *l;
    }
    total * proto.lit(1.0 / level_losses.len() as f64)
}

fn segment_of_edges(edges: &[f64], f: f64) -> usize {
    let k = edges.len() - 1;
    for seg in 0..k {
        if f < edges[seg + 1] {
            return seg;
        }
    }
    k - 1
}

/// Seam-continuity penalty: the squared log-model gap at each knee,
/// summed over knees. Zero for K = 1.
pub fn seam_loss<R: Real>(fit: &PiecewiseFit<R>) -> R {
    let proto = fit.betas[0];
    let mut acc = proto.lit(0.0);
    for k in 0..fit.knees.len() {
        let lf = fit.knees[k].ln();
        let left = fit.log_amplitudes[k] - fit.betas[k] * lf;
        let right = fit.log_amplitudes[k + 1] - fit.betas[k + 1] * lf;
        let gap = left - right;
        acc = acc + gap * gap;
    }
    acc
}

/// `∫_{fa}^{fb} f^(s-1) df`, evaluated as `fa^s * expm1(s L)/s` with
/// `L = ln(fb/fa)`; switches to a three-term series for tiny `s` so the
/// value is continuous and fully accurate through `s = 0`.
fn band_integral<R: Real>(f_a: R, f_b: R, s: R) -> R {
    let l = f_b.ln() - f_a.ln();
    let fa_s = (s * f_a.ln()).exp();
    if s.val().abs() < CENTROID_EPS {
        let sl = s * l;
        let series = l.lit(1.0) + sl * l.lit(0.5) + sl * sl * l.lit(1.0 / 6.0);
        fa_s * l * series
    } else {
        fa_s * (s * l).expm1() / s
    }
}

/// Energy-weighted representative frequency of a band under
/// `P(f) ∝ f^(-beta)`:
/// `f_c = ∫ f·P df / ∫ P df`, in closed form with stable limits at
/// beta = 1 (numerator order) and beta = 2 (denominator order).
/// Always lies strictly inside `(f_a, f_b)`.
pub fn energy_centroid<R: Real>(f_a: R, f_b: R, beta: R) -> Result<R> {
    if !(f_a.val() > 0.0 && f_a.val() < f_b.val()) {
        return Err(Error::param(format!("need 0 < f_a < f_b, got ({}, {})", f_a.val(), f_b.val())));
    }
    if !beta.val().is_finite() {
        return Err(Error::param("beta must be finite"));
    }
    let two = beta.lit(2.0);
    let one = beta.lit(1.0);
    Ok(band_integral(f_a, f_b, two - beta) / band_integral(f_a, f_b, one - beta))
}

/// Consensus fit: per-channel fits averaged in log-frequency space
/// (mean of log knees; arithmetic mean of betas and log amplitudes).
pub fn consensus_fit<R: Real>(fits: &[PiecewiseFit<R>]) -> Result<PiecewiseFit<R>> {
    if fits.is_empty() {
        return Err(Error::param("no fits to combine"));
    }
    let k = fits[0].k();
    for f in fits {
        if f.k() != k || f.knees.len() != fits[0].knees.len() {
            return Err(Error::shape("fits disagree on K"));
        }
    }
    let inv = fits[0].betas[0].lit(1.0 / fits.len() as f64);
    let mut knees = Vec::with_capacity(k.saturating_sub(1));
    for i in 0..fits[0].knees.len() {
        let mut acc = fits[0].knees[i].ln();
        for f in &fits[1..] {
            acc = acc + f.knees[i].ln();
        }
        knees.push((acc * inv).exp());
    }
    let mut betas = Vec::with_capacity(k);
    let mut amps = Vec::with_capacity(k);
    for i in 0..k {
        let mut b = fits[0].betas[i];
        let mut a = fits[0].log_amplitudes[i];
        for f in &fits[1..] {
            b = b + f.betas[i];
            a = a + f.log_amplitudes[i];
        }
        betas.push(b * inv);
        amps.push(a * inv);
    }
    Ok(PiecewiseFit { knees, betas, log_amplitudes: amps, f_min: fits[0].f_min, f_max: fits[0].f_max })
}

/// Plain OLS slope of log power against log frequency over the whole
/// spectrum (no segmentation, no clamping).
pub fn log_log_slope(spectrum: &Spectrum) -> f64 {
    let xs = spectrum.log_freqs();
    let ys = spectrum.log_power();
    ols(&xs, &ys).0
}

/// (slope, intercept) of ordinary least squares y = slope x + intercept.
pub fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let mx = sx / n;
    let my = sy / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Result of the offline grid fit, with the achieved squared log
/// residual and the candidate knee grid used.
#[derive(Debug, Clone)]
pub struct InitFit {
    pub fit: PiecewiseFit<f64>,
    pub sse: f64,
    pub candidates: Vec<f64>,
}

/// Log-spaced candidate knee frequencies strictly inside the band.
pub fn knee_candidates(f_min: f64, f_max: f64, n: usize) -> Vec<f64> {
    let l0 = f_min.ln();
    let l1 = f_max.ln();
    (1..=n).map(|i| (l0 + (l1 - l0) * i as f64 / (n + 1) as f64).exp()).collect()
}

/// Offline initializer: exhaustive search over log-spaced knee
/// candidates (minimum 3 bins per segment) with per-segment OLS in
/// log-log space; returns the global grid minimizer of the total
/// squared log residual. `K = 1` reduces to plain log-log regression.
pub fn init_fit(spectrum: &Spectrum, k: usize) -> Result<PiecewiseFit<f64>> {
    Ok(init_fit_detailed(spectrum, k, 32)?.fit)
}

pub fn init_fit_detailed(spectrum: &Spectrum, k: usize, n_candidates: usize) -> Result<InitFit> {
    spectrum.validate()?;
    if k == 0 {
        return Err(Error::param("K must be at least 1"));
    }
    if spectrum.len() < 4 * k {
        return Err(Error::param(format!("need at least {} bins for K = {k}, got {}", 4 * k, spectrum.len())));
    }
    let xs = spectrum.log_freqs();
    let ys = spectrum.log_power();
    // Prefix sums make per-segment OLS O(1).
    let n = xs.len();
    let mut px = vec![0.0; n + 1];
    let mut py = vec![0.0; n + 1];
    let mut pxx = vec![0.0; n + 1];
    let mut pxy = vec![0.0; n + 1];
    let mut pyy = vec![0.0; n + 1];
    for i in 0..n {
        px[i + 1] = px[i] + xs[i];
        py[i + 1] = py[i] + ys[i];
        pxx[i + 1] = pxx[i] + xs[i] * xs[i];
        pxy[i + 1] = pxy[i] + xs[i] * ys[i];
        pyy[i + 1] = pyy[i] + ys[i] * ys[i];
    }
    // (beta, log_amp, sse) for the bin range [lo, hi)
    let seg_fit = |lo: usize, hi: usize| -> (f64, f64, f64) {
        let m = (hi - lo) as f64;
        let sx = px[hi] - px[lo];
        let sy = py[hi] - py[lo];
        let sxx = pxx[hi] - pxx[lo];
        let sxy = pxy[hi] - pxy[lo];
        let syy = pyy[hi] - pyy[lo];
        let det = m * sxx - sx * sx;
        let slope_raw = if det.abs() > 1e-30 { (m * sxy - sx * sy) / det } else { 0.0 };
        let beta = (-slope_raw).clamp(BETA_MIN, BETA_MAX);
        let slope = -beta;
        let intercept = (sy - slope * sx) / m;
        let sse = syy + slope * slope * sxx + m * intercept * intercept
            - 2.0 * slope * sxy
            - 2.0 * intercept * sy
            + 2.0 * slope * intercept * sx;
        (beta, intercept, sse.max(0.0))
    };

    let candidates = knee_candidates(spectrum.f_min, spectrum.f_max, n_candidates);
    // First bin index at or above each candidate frequency.
    let cand_bins: Vec<usize> = candidates
        .iter()
        .map(|&c| spectrum.freqs.partition_point(|&f| f < c))
        .collect();

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut cut_idx = vec![0usize; k - 1];
    // Depth-first enumeration of strictly increasing candidate tuples
    // with at least 3 bins per segment.
    fn descend(
        depth: usize,
        start: usize,
        cand_bins: &[usize],
        n_bins: usize,
        k: usize,
        cut_idx: &mut Vec<usize>,
        seg_fit: &dyn Fn(usize, usize) -> (f64, f64, f64),
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if depth == k - 1 {
            let mut lo = 0usize;
            let mut total = 0.0;
            let mut ok = true;
            for d in 0..k {
                let hi = if d < k - 1 { cand_bins[cut_idx[d]] } else { n_bins };
                if hi < lo + 3 || hi > n_bins {
                    ok = false;
                    break;
                }
                total += seg_fit(lo, hi).2;
                lo = hi;
            }
            if ok && best.as_ref().map_or(true, |(b, _)| total < *b) {
                *best = Some((total, cut_idx.clone()));
            }
            return;
        }
        for c in start..cand_bins.len() {
            cut_idx[depth] = c;
            descend(depth + 1, c + 1, cand_bins, n_bins, k, cut_idx, seg_fit, best);
        }
    }
    if k == 1 {
        let (beta, amp, sse) = seg_fit(0, n);
        return Ok(InitFit {
            fit: PiecewiseFit {
                knees: vec![],
                betas: vec![beta],
                log_amplitudes: vec![amp],
                f_min: spectrum.f_min,
                f_max: spectrum.f_max,
            },
            sse,
            candidates,
        });
    }
    descend(0, 0, &cand_bins, n, k, &mut cut_idx, &seg_fit, &mut best);
    let (sse, cuts) = best.ok_or_else(|| {
        Error::param(format!("no candidate knee placement leaves 3 bins per segment (bins = {n}, K = {k})"))
    })?;
    let mut knees = Vec::with_capacity(k - 1);
    let mut betas = Vec::with_capacity(k);
    let mut amps = Vec::with_capacity(k);
    let mut lo = 0usize;
    for d in 0..k {
        let hi = if d < k - 1 { cand_bins[cuts[d]] } else { n };
        let (b, a, _) = seg_fit(lo, hi);
        betas.push(b);
        amps.push(a);
        if d < k - 1 {
            knees.push(candidates[cuts[d]]);
        }
        lo = hi;
    }
    Ok(InitFit {
        fit: PiecewiseFit { knees, betas, log_amplitudes: amps, f_min: spectrum.f_min, f_max: spectrum.f_max },
        sse,
        candidates,
    })
}

/// Total squared log residual of a fit on a spectrum (all bins, raw
/// amplitudes). Used to re-check grid minimality.
pub fn log_residual_sse(fit: &PiecewiseFit<f64>, spectrum: &Spectrum) -> f64 {
    let edges = fit.edge_values();
    let mut sse = 0.0;
    for i in 0..spectrum.len() {
        let f = spectrum.freqs[i];
        let seg = segment_of_edges(&edges, f);
        let model = fit.log_amplitudes[seg] - fit.betas[seg] * f.ln();
        let r = model - spectrum.power[i].max(LOG_POWER_FLOOR).ln();
        sse += r * r;
    }
    sse
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(t: usize, f: f64) -> Vec<f64> {
        (0..t).map(|i| (std::f64::consts::TAU * f * i as f64).sin()).collect()
    }

    #[test]
    fn sinusoid_concentrates_power() {
        let t = 256;
        let f0 = 16.0 / 256.0;
        let sp = periodogram(&sine(t, f0), 1.0 / 256.0, 0.5).unwrap();
        let total: f64 = sp.power.iter().sum();
        let at_f0: f64 = sp
            .freqs
            .iter()
            .zip(sp.power.iter())
            .filter(|(f, _)| (**f - f0).abs() < 1e-12)
            .map(|(_, p)| *p)
            .sum();
        assert!(at_f0 / total > 0.99, "fraction {}", at_f0 / total);
    }

    #[test]
    fn constant_input_has_no_power_off_dc() {
        let sp = periodogram(&vec![3.5; 64], 1.0 / 64.0, 0.5).unwrap();
        for &p in &sp.power {
            assert!(p < 1e-20);
        }
    }

    #[test]
    fn empty_band_is_an_error() {
        let x = sine(64, 0.25);
        assert!(periodogram(&x, 0.001, 0.002).is_err());
    }

    #[test]
    fn white_noise_slope_is_flat() {
        // averaged periodogram over 64 seeds, raw OLS slope
        let t = 2048;
        let mut avg: Option<Spectrum> = None;
        for seed in 0..64u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..t).map(|_| rng.gen::<f64>() - 0.5).collect();
            let sp = periodogram(&x, 1.0 / t as f64, 0.5).unwrap();
            match &mut avg {
                None => avg = Some(sp),
                Some(a) => {
                    for i in 0..a.power.len() {
                        a.power[i] += sp.power[i];
                    }
                }
            }
        }
        let slope = log_log_slope(&avg.unwrap());
        assert!(slope.abs() < 0.15, "slope {slope}");
    }

    fn synth_spectrum(fit: &PiecewiseFit<f64>, n_bins: usize) -> Spectrum {
        let proj = seam_project(fit);
        let freqs: Vec<f64> = (1..=n_bins)
            .map(|i| fit.f_min * ((fit.f_max / fit.f_min).ln() * i as f64 / (n_bins + 1) as f64).exp())
            .collect();
        let power = freqs
            .iter()
            .map(|&f| {
                let s = proj.segment_of(f);
                (proj.log_amplitudes[s] - proj.betas[s] * f.ln()).exp()
            })
            .collect();
        Spectrum { freqs, power, f_min: fit.f_min, f_max: fit.f_max }
    }

    #[test]
    fn grid_fit_recovers_exact_synthetic_fit() {
        // true knees sit exactly on the candidate grid
        let cands = knee_candidates(0.004, 0.5, 32);
        let truth = PiecewiseFit {
            knees: vec![cands[9], cands[22]],
            betas: vec![2.2, 1.1, 0.5],
            log_amplitudes: vec![0.0; 3],
            f_min: 0.004,
            f_max: 0.5,
        };
        let truth = seam_project(&PiecewiseFit { log_amplitudes: vec![1.0, 0.0, 0.0], ..truth });
        let sp = synth_spectrum(&truth, 800);
        let got = init_fit(&sp, 3).unwrap();
        for (g, t) in got.knees.iter().zip(truth.knees.iter()) {
            assert!((g.ln() - t.ln()).abs() < 1e-9, "knee {g} vs {t}");
        }
        for (g, t) in got.betas.iter().zip(truth.betas.iter()) {
            assert!((g - t).abs() < 1e-6, "beta {g} vs {t}");
        }
    }

    #[test]
    fn single_exponent_any_knees_fit_well() {
        let truth = PiecewiseFit {
            knees: vec![],
            betas: vec![1.4],
            log_amplitudes: vec![0.3],
            f_min: 0.004,
            f_max: 0.5,
        };
        let sp = synth_spectrum(&truth, 600);
        let got = init_fit_detailed(&sp, 3, 32).unwrap();
        for b in &got.fit.betas {
            assert!((b - 1.4).abs() < 0.05, "beta {b}");
        }
        assert!(got.sse < 1e-3, "sse {}", got.sse);
        // K = 1 degenerate case: plain regression, no knees
        let k1 = init_fit(&sp, 1).unwrap();
        assert!(k1.knees.is_empty());
        assert!((k1.betas[0] - 1.4).abs() < 1e-9);
    }

    #[test]
    fn grid_minimum_is_global_over_reevaluation() {
        let truth = PiecewiseFit {
            knees: vec![0.02, 0.12],
            betas: vec![2.5, 1.0, 0.4],
            log_amplitudes: vec![1.0, 0.0, 0.0],
            f_min: 0.004,
            f_max: 0.5,
        };
        let sp = synth_spectrum(&seam_project(&truth), 500);
        let got = init_fit_detailed(&sp, 3, 16).unwrap();
        // re-evaluate random candidate pairs; none can beat the minimizer
        let bins: Vec<usize> =
            got.candidates.iter().map(|&c| sp.freqs.partition_point(|&f| f < c)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let i = rng.gen_range(0..bins.len());
            let j = rng.gen_range(0..bins.len());
            if i >= j {
                continue;
            }
            let (b0, b1) = (bins[i], bins[j]);
            if b0 < 3 || b1 < b0 + 3 || sp.len() < b1 + 3 {
                continue;
            }
            let trial = PiecewiseFit {
                knees: vec![got.candidates[i], got.candidates[j]],
                betas: vec![1.0; 3],
                log_amplitudes: vec![0.0; 3],
                f_min: sp.f_min,
                f_max: sp.f_max,
            };
            // refit segments by OLS for a fair residual comparison
            let mut total = 0.0;
            let edges = trial.edge_values();
            for seg in 0..3 {
                let xs: Vec<f64> = sp
                    .freqs
                    .iter()
                    .zip(sp.power.iter())
                    .filter(|(f, _)| **f >= edges[seg] && (**f < edges[seg + 1] || seg == 2))
                    .map(|(f, _)| f.ln())
                    .collect();
                let ys: Vec<f64> = sp
                    .freqs
                    .iter()
                    .zip(sp.power.iter())
                    .filter(|(f, _)| **f >= edges[seg] && (**f < edges[seg + 1] || seg == 2))
                    .map(|(_, p)| p.max(1e-300).ln())
                    .collect();
                let (m, q) = ols(&xs, &ys);
                for (x, y) in xs.iter().zip(ys.iter()) {
                    let r = m * x + q - y;
                    total += r * r;
                }
            }
            assert!(got.sse <= total + 1e-9, "grid min {} beaten by {}", got.sse, total);
        }
    }

    #[test]
    fn eval_piecewise_basics() {
        let fit = PiecewiseFit {
            knees: vec![0.1],
            betas: vec![2.0, 0.3],
            log_amplitudes: vec![0.0, 0.0],
            f_min: 0.01,
            f_max: 0.5,
        };
        // beta = 2, c = 1 at f = 0.1 -> 100, from the first segment side
        let v = eval_piecewise(&fit, 0.0999999).unwrap();
        assert!((v - 100.0).abs() / 100.0 < 1e-4);
        // continuity at the knee after projection
        let proj = seam_project(&fit);
        let left = (proj.log_amplitudes[0] - proj.betas[0] * 0.1f64.ln()).exp();
        let right = (proj.log_amplitudes[1] - proj.betas[1] * 0.1f64.ln()).exp();
        assert!(((left - right) / left).abs() < 1e-9);
        // beta = 0 segment evaluates to its constant amplitude
        let flat = PiecewiseFit {
            knees: vec![],
            betas: vec![0.0],
            log_amplitudes: vec![1.0],
            f_min: 0.01,
            f_max: 0.5,
        };
        let a = eval_piecewise(&flat, 0.02).unwrap();
        let b = eval_piecewise(&flat, 0.4).unwrap();
        assert_eq!(a, b);
        assert!((a - 1f64.exp()).abs() < 1e-12);
        assert!(eval_piecewise(&flat, 0.6).is_err());
    }

    #[test]
    fn fit_loss_zero_exact_one_for_factor_e() {
        let truth = PiecewiseFit {
            knees: vec![0.05],
            betas: vec![1.5, 0.7],
            log_amplitudes: vec![0.5, 0.0],
            f_min: 0.004,
            f_max: 0.5,
        };
        let truth = seam_project(&truth);
        let sp = synth_spectrum(&truth, 300);
        let z = fit_loss(&truth, &sp);
        assert!(z < 1e-10, "loss {z}");
        let mut scaled = sp.clone();
        for p in scaled.power.iter_mut() {
            *p *= std::f64::consts::E;
        }
        let one = fit_loss(&truth, &scaled);
        assert!((one - 1.0).abs() < 1e-9, "loss {one}");
        // joint rescale of data and model leaves the loss unchanged
        let mut shifted = truth.clone();
        for a in shifted.log_amplitudes.iter_mut() {
            *a += 3.0;
        }
        let mut scaled3 = sp.clone();
        for p in scaled3.power.iter_mut() {
            *p *= (3.0f64).exp();
        }
        let inv = fit_loss(&shifted, &scaled3);
        assert!((inv - z).abs() < 1e-9);
    }

    #[test]
    fn seam_loss_quadratic_in_offset() {
        let mut fit = PiecewiseFit {
            knees: vec![0.05],
            betas: vec![1.5, 0.7],
            log_amplitudes: vec![0.5, 0.0],
            f_min: 0.004,
            f_max: 0.5,
        };
        fit = seam_project(&fit);
        assert!(seam_loss(&fit) < 1e-18);
        let mut off = fit.clone();
        off.log_amplitudes[1] += 1.0;
        assert!((seam_loss(&off) - 1.0).abs() < 1e-12);
        let mut off2 = fit.clone();
        off2.log_amplitudes[1] += 2.0;
        assert!((seam_loss(&off2) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn centroid_flat_band_is_midpoint() {
        let c = energy_centroid(0.1, 0.3, 0.0).unwrap();
        assert!((c - 0.2).abs() < 1e-12);
    }

    #[test]
    fn centroid_beta_one_and_two_limits() {
        let c1 = energy_centroid(0.01, 0.1, 1.0).unwrap();
        assert!((c1 - 0.09 / (10f64).ln()).abs() < 1e-12, "{c1}");
        let c2 = energy_centroid(0.01, 0.1, 2.0).unwrap();
        assert!((c2 - (10f64).ln() / 90.0).abs() < 1e-12, "{c2}");
    }

    #[test]
    fn centroid_monotone_decreasing_in_beta() {
        let mut prev = f64::INFINITY;
        let mut b = BETA_MIN;
        while b <= BETA_MAX {
            let c = energy_centroid(0.02, 0.4, b).unwrap();
            assert!(c < prev, "centroid not decreasing at beta {b}");
            assert!(c > 0.02 && c < 0.4);
            prev = c;
            b += 0.1;
        }
    }

    #[test]
    fn centroid_rejects_bad_band() {
        assert!(energy_centroid(0.3, 0.1, 1.0).is_err());
    }

    #[test]
    fn consensus_fit_averages_in_log_space() {
        let a = PiecewiseFit {
            knees: vec![0.01],
            betas: vec![2.0, 1.0],
            log_amplitudes: vec![0.0, 0.0],
            f_min: 0.004,
            f_max: 0.5,
        };
        let b = PiecewiseFit { knees: vec![0.04], ..a.clone() };
        let c = consensus_fit(&[a, b]).unwrap();
        assert!((c.knees[0] - 0.02).abs() < 1e-12);
    }
}
