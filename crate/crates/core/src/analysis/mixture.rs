//! Best-of-restarts L1 fitting of exponential mixtures to decay
//! kernels, and the approximation-rate study over the mixture size.
//!
//! Weights live on the simplex via a softmax parameterization, rates
//! are positive via log parameterization. Each restart runs Adam on
//! the L1 subgradient and keeps the best iterate seen; one restart is
//! warm-started from the previous mixture size so errors are monotone
//! nonincreasing in K.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelProfile;
use crate::signalgen::powerlaw_kernel;
use crate::spectral::ols;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureFit {
    pub k: usize,
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
    /// Achieved discrete L1 error against the target.
    pub l1_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureFitConfig {
    pub restarts: usize,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MixtureFitConfig {
    fn default() -> Self {
        MixtureFitConfig { restarts: 16, iters: 800, lr: 0.08, seed: 0 }
    }
}

struct Theta {
    w_logits: Vec<f64>,
    log_rates: Vec<f64>,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// L1 error and subgradient wrt (w_logits, log_rates).
fn objective(theta: &Theta, target: &KernelProfile) -> (f64, Vec<f64>, Vec<f64>) {
    let k = theta.w_logits.len();
    let a = softmax(&theta.w_logits);
    let rates: Vec<f64> = theta.log_rates.iter().map(|r| r.exp()).collect();
    let dt = target.dt;
    let mut err = 0.0;
    let mut grad_a = vec![0.0; k];
    let mut grad_rate = vec![0.0; k];
    let mut decays = vec![0.0; k];
    for (l, &gv) in target.values.iter().enumerate() {
        let t = l as f64 * dt;
        let mut model = 0.0;
        for j in 0..k {
            decays[j] = (-rates[j] * t).exp();
            model += a[j] * decays[j];
        }
        let e = model - gv;
        err += e.abs() * dt;
        let s = if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 };
        for j in 0..k {
            grad_a[j] += s * decays[j] * dt;
            grad_rate[j] += s * a[j] * (-t) * decays[j] * dt;
        }
    }
    // chain through softmax and the log parameterization
    let dot: f64 = a.iter().zip(grad_a.iter()).map(|(x, y)| x * y).sum();
    let grad_logits: Vec<f64> = (0..k).map(|j| a[j] * (grad_a[j] - dot)).collect();
    let grad_log_rates: Vec<f64> = (0..k).map(|j| grad_rate[j] * rates[j]).collect();
    (err, grad_logits, grad_log_rates)
}

fn descend(theta: &mut Theta, target: &KernelProfile, iters: usize, lr: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let k = theta.w_logits.len();
    let mut m = vec![0.0; 2 * k];
    let mut v = vec![0.0; 2 * k];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    // the L1 subgradient never vanishes, so Adam needs a decaying step
    // to settle; decay spans four orders of magnitude
    let decay = 1e-4f64.powf(1.0 / iters as f64);
    let mut best_err = f64::INFINITY;
    let mut best_w = softmax(&theta.w_logits);
    let mut best_r: Vec<f64> = theta.log_rates.iter().map(|r| r.exp()).collect();
    let mut lr_t = lr;
    for it in 0..iters {
        let (err, gl, gr) = objective(theta, target);
        if err < best_err {
            best_err = err;
            best_w = softmax(&theta.w_logits);
            best_r = theta.log_rates.iter().map(|r| r.exp()).collect();
        }
        let t = (it + 1) as i32;
        for (i, g) in gl.iter().chain(gr.iter()).enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            let step = lr_t * mh / (vh.sqrt() + eps);
            if i < k {
                theta.w_logits[i] -= step;
            } else {
                theta.log_rates[i - k] -= step;
            }
        }
        lr_t *= decay;
    }
    let (err, _, _) = objective(theta, target);
    if err < best_err {
        best_err = err;
        best_w = softmax(&theta.w_logits);
        best_r = theta.log_rates.iter().map(|r| r.exp()).collect();
    }
    (best_err, best_w, best_r)
}

/// Constrained best-of-restarts L1 fit of a K-exponential mixture to a
/// sampled kernel. Rates are initialized log-spaced over the band the
/// grid can resolve, with seeded jitter; `warm` optionally injects a
/// known starting mixture (used by the rate study for monotonicity).
pub fn fit_exp_mixture(target: &KernelProfile, k: usize, cfg: &MixtureFitConfig) -> Result<MixtureFit> {
    fit_exp_mixture_warm(target, k, cfg, None)
}

pub fn fit_exp_mixture_warm(
    target: &KernelProfile,
    k: usize,
    cfg: &MixtureFitConfig,
    warm: Option<&MixtureFit>,
) -> Result<MixtureFit> {
    if k == 0 {
        return Err(Error::param("mixture size K must be at least 1"));
    }
    if target.len() < 2 {
        return Err(Error::param("target kernel too short to fit"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (k as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let horizon = target.lag(target.len() - 1);
    let rate_lo = (1.0 / horizon).ln();
    let rate_hi = (2.0 / target.dt).ln();

    let mut best: Option<MixtureFit> = None;
    let consider = |err: f64, w: Vec<f64>, r: Vec<f64>, best: &mut Option<MixtureFit>| {
        if best.as_ref().map_or(true, |b| err < b.l1_error) {
            *best = Some(MixtureFit { k, weights: w, rates: r, l1_error: err });
        }
    };

    if let Some(prev) = warm {
        // continue from the previous size: new component starts tiny
        let mut w_logits: Vec<f64> = prev.weights.iter().map(|w| w.max(1e-12).ln()).collect();
        let mut log_rates: Vec<f64> = prev.rates.iter().map(|r| r.ln()).collect();
        while w_logits.len() < k {
            w_logits.push(-12.0 + w_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            log_rates.push(rng.gen_range(rate_lo..rate_hi));
        }
        w_logits.truncate(k);
        log_rates.truncate(k);
        let mut theta = Theta { w_logits, log_rates };
        let (e0, w0, r0) = (objective(&theta, target).0, softmax(&theta.w_logits), theta.log_rates.iter().map(|r| r.exp()).collect::<Vec<_>>());
        consider(e0, w0, r0, &mut best);
        let (err, w, r) = descend(&mut theta, target, cfg.iters, cfg.lr);
        consider(err, w, r, &mut best);
    }

    // Deterministic phase, identical for every seed: one log-spaced
    // spread plus a grid of geometric rate ladders (the structure
    // optimal mixtures take for long-memory targets). This pins the
    // winning basin so results are stable across seeds.
    let mut deterministic_inits: Vec<Vec<f64>> = Vec::new();
    deterministic_inits.push(
        (0..k)
            .map(|j| {
                let u = if k == 1 { 0.5 } else { j as f64 / (k - 1) as f64 };
                rate_lo + u * (rate_hi - rate_lo)
            })
            .collect(),
    );
    if k > 1 {
        for bi in 0..6 {
            let base = rate_lo + (rate_hi - rate_lo) * bi as f64 / 6.0;
            for &ratio in &[1.5f64, 2.5, 4.0, 7.0, 12.0, 20.0, 30.0] {
                let lr_ratio = ratio.ln();
                deterministic_inits
                    .push((0..k).map(|j| (base + j as f64 * lr_ratio).min(rate_hi)).collect());
            }
        }
    }
    for log_rates in deterministic_inits {
        let mut theta = Theta { w_logits: vec![0.0; k], log_rates };
        let (err, w, r) = descend(&mut theta, target, cfg.iters, cfg.lr);
        consider(err, w, r, &mut best);
    }
    // Random phase: independent draws across the resolvable band.
    for _ in 0..cfg.restarts {
        let mut theta = Theta {
            w_logits: (0..k).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            log_rates: (0..k).map(|_| rng.gen_range(rate_lo..rate_hi)).collect(),
        };
        let (err, w, r) = descend(&mut theta, target, cfg.iters, cfg.lr);
        consider(err, w, r, &mut best);
    }
    // polish the best basin with a slow, long descent
    if let Some(b) = &best {
        let mut theta = Theta {
            w_logits: b.weights.iter().map(|w| w.max(1e-12).ln()).collect(),
            log_rates: b.rates.iter().map(|r| r.ln()).collect(),
        };
        let (err, w, r) = descend(&mut theta, target, 2 * cfg.iters, cfg.lr * 0.25);
        consider(err, w, r, &mut best);
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateStudy {
    pub alpha: f64,
    /// `(K, achieved L1 error)` rows in ascending K.
    pub rows: Vec<(usize, f64)>,
    /// OLS slope of `ln error` against `ln K`.
    pub slope: f64,
    pub grid_dt: f64,
    pub grid_len: usize,
}

/// Fits mixtures of increasing size to the power-law kernel
/// `(1+t)^(-alpha)` and reports the achieved-error decay. The grid
/// reaches far enough that the truncated tail mass is below 1% of the
/// total.
pub fn approximation_rate_study(alpha: f64, k_list: &[usize], cfg: &MixtureFitConfig) -> Result<RateStudy> {
    if alpha <= 1.0 {
        return Err(Error::param(format!("need alpha > 1, got {alpha}")));
    }
    if k_list.is_empty() {
        return Err(Error::param("empty K list"));
    }
    let dt = 0.05;
    // tail mass of (1+t)^(-alpha) beyond T is (1+T)^(1-alpha)/(alpha-1);
    // keep it under 1% of the total mass 1/(alpha-1)
    let horizon = (100.0f64.powf(1.0 / (alpha - 1.0)) - 1.0).min(20_000.0);
    let len = ((horizon / dt).ceil() as usize + 1).max(64);
    let target = powerlaw_kernel(alpha, len, dt)?;

    let mut rows = Vec::with_capacity(k_list.len());
    let mut prev: Option<MixtureFit> = None;
    let mut ks = k_list.to_vec();
    ks.sort_unstable();
    for &k in &ks {
        let fit = fit_exp_mixture_warm(&target, k, cfg, prev.as_ref())?;
        rows.push((k, fit.l1_error));
        prev = Some(fit);
    }
    let xs: Vec<f64> = rows.iter().map(|(k, _)| (*k as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|(_, e)| e.max(1e-300).ln()).collect();
    let (slope, _) = ols(&xs, &ys);
    Ok(RateStudy { alpha, rows, slope, grid_dt: dt, grid_len: len })
}
