//! AdamW with decoupled weight decay, global-norm gradient clipping,
//! and a linear-warmup + cosine-decay learning-rate schedule, plus a
//! finite-difference gradient checker.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Tv};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 0.1,
            betas: (0.9, 0.999),
            eps: 1e-8,
            clip_norm: Some(1.0),
            warmup_steps: 0,
            total_steps: 0,
        }
    }
}

/// Per-parameter first/second moment state plus the step counter.
pub struct AdamW {
    pub cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &[Tensor]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        let v = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        AdamW { cfg, m, v, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate at a given step: linear warmup from 0 to the peak,
    /// then cosine decay to 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.cfg.lr;
        let w = self.cfg.warmup_steps;
        if w > 0 && step < w {
            return peak * step as f64 / w as f64;
        }
        if self.cfg.total_steps > w {
            let progress = (step - w) as f64 / (self.cfg.total_steps - w) as f64;
            let progress = progress.min(1.0);
            return peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        peak
    }

    /// Scales all gradients in place by `min(1, clip / ||g||_2)` where
    /// the norm is taken over the full concatenated gradient.
    pub fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> f64 {
        let sq: f64 = grads.iter().flat_map(|g| g.data.iter()).map(|&x| x * x).sum();
        let norm = sq.sqrt();
        if norm > clip && norm > 0.0 {
            let s = clip / norm;
            for g in grads.iter_mut() {
                for x in g.data.iter_mut() {
                    *x *= s;
                }
            }
        }
        norm
    }

    /// One update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut [Tensor], grads: &mut [Tensor]) -> f64 {
        assert_eq!(params.len(), grads.len());
        let pre_norm = match self.cfg.clip_norm {
            Some(c) => Self::clip_global_norm(grads, c),
            None => {
                let sq: f64 = grads.iter().flat_map(|g| g.data.iter()).map(|&x| x * x).sum();
                sq.sqrt()
            }
        };
        let lr = self.lr_at(self.step);
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = b1 * m.data[j] + (1.0 - b1) * gj;
                v.data[j] = b2 * v.data[j] + (1.0 - b2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p.data[j]);
            }
        }
        pre_norm
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub n_checked: usize,
    pub pass: bool,
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with a magnitude floor so that near-zero gradients
/// are compared absolutely.
pub fn relative_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central-difference check of a tape-built scalar function against its
/// reverse-mode gradient on a seeded sample of coordinates.
///
/// `f` must rebuild the graph from the given leaves on each call;
/// probed coordinates are sampled uniformly over all parameter
/// elements, reproducibly for a fixed seed.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64, n_probes: usize, seed: u64) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Tv<'t>]) -> Tv<'t>,
{
    let eval = |ps: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let leaves: Vec<Tv<'_>> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        f(&tape, &leaves).value()
    };

    // Reverse-mode gradients at the base point.
    let grads: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<Tv<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &leaves);
        tape.backward(loss).expect("grad_check loss must be scalar");
        leaves.iter().map(|l| l.grad()).collect()
    };

    let total: usize = params.iter().map(|p| p.data.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst = None;
    let n = n_probes.min(total);
    for _ in 0..n {
        let mut flat = rng.gen_range(0..total);
        let mut pi = 0usize;
        while flat >= params[pi].data.len() {
            flat -= params[pi].data.len();
            pi += 1;
        }
        let mut plus = params.to_vec();
        plus[pi].data[flat] += h;
        let mut minus = params.to_vec();
        minus[pi].data[flat] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let ad = grads[pi].data[flat];
        let rel = relative_err(ad, fd);
        sum_rel += rel;
        if rel > max_rel {
            max_rel = rel;
            worst = Some((pi, flat, ad, fd));
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        mean_rel_err: if n > 0 { sum_rel / n as f64 } else { 0.0 },
        n_checked: n,
        pass: max_rel <= tol,
        worst,
    }
}
