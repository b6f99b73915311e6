//! Composite loss assembly: task losses, spectral-fit auxiliaries,
//! step/decay anchoring, exponent hinges, alignment to the offline
//! fit, and the drift intervention.

use serde::{Deserialize, Serialize};

use crate::analysis::linear_cka_on;
use crate::engine::{Real, Tape, Tensor, Tv};
use crate::error::{Error, Result};
use crate::signalgen::{BETA_MAX, BETA_MIN};
use crate::spectral::PiecewiseFit;

/// Weights of the composite objective. Defaults follow the training
/// protocol this pipeline ships with.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_fit: f64,
    pub w_seam: f64,
    pub lambda_delta: f64,
    pub lambda_a: f64,
    pub w_hyp: f64,
    pub lambda_beta: f64,
    pub label_smoothing: f64,
    /// Drift-intervention weight; 0 disables the paired-view term.
    pub lambda_drift: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_fit: 3.0,
            w_seam: 0.1,
            lambda_delta: 0.1,
            lambda_a: 0.1,
            w_hyp: 0.3,
            lambda_beta: 0.5,
            label_smoothing: 0.1,
            lambda_drift: 0.0,
        }
    }
}

impl LossWeights {
    /// Task loss only; every auxiliary term switched off.
    pub fn task_only() -> Self {
        LossWeights {
            w_fit: 0.0,
            w_seam: 0.0,
            lambda_delta: 0.0,
            lambda_a: 0.0,
            w_hyp: 0.0,
            lambda_beta: 0.0,
            label_smoothing: 0.1,
            lambda_drift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_fit,
            self.w_seam,
            self.lambda_delta,
            self.lambda_a,
            self.w_hyp,
            self.lambda_beta,
            self.label_smoothing,
            self.lambda_drift,
        ];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::param("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Weighted per-component values for logging; the sum identity
/// `total = sum of parts` holds exactly by construction.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub task: f64,
    pub fit: f64,
    pub seam: f64,
    pub delta_anchor: f64,
    pub a_scale: f64,
    pub hyp: f64,
    pub beta: f64,
    pub drift: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn sum_of_parts(&self) -> f64 {
        self.task + self.fit + self.seam + self.delta_anchor + self.a_scale + self.hyp + self.beta + self.drift
    }
}

/// Smoothed cross-entropy against `(1-eps) one-hot + eps/C uniform`
/// targets, on the tape, for one logit vector.
pub fn task_loss_classification_on<'t>(tape: &'t Tape, logits: Tv<'t>, label: usize, eps: f64, n_classes: usize) -> Result<Tv<'t>> {
    if label >= n_classes {
        return Err(Error::data(format!("label {label} out of range for {n_classes} classes")));
    }
    let mut q = vec![eps / n_classes as f64; n_classes];
    q[label] += 1.0 - eps;
    let target = tape.constant(Tensor::vector(q));
    Ok(logits.logsumexp() - target.dot(logits))
}

/// Value-level smoothed cross-entropy.
pub fn task_loss_classification(logits: &[f64], label: usize, eps: f64) -> Result<f64> {
    let n_classes = logits.len();
    if n_classes < 2 {
        return Err(Error::param("classification needs at least 2 classes"));
    }
    let tape = Tape::new();
    let lv = tape.constant(Tensor::vector(logits.to_vec()));
    Ok(task_loss_classification_on(&tape, lv, label, eps, n_classes)?.value())
}

/// Entropy of the smoothed target: the attainable floor of the
/// smoothed cross-entropy (Gibbs inequality).
pub fn smoothed_loss_floor(eps: f64, n_classes: usize) -> f64 {
    let qc = 1.0 - eps + eps / n_classes as f64;
    let qw = eps / n_classes as f64;
    let mut h = -qc * qc.ln();
    if qw > 0.0 {
        h -= (n_classes - 1) as f64 * qw * qw.ln();
    }
    h
}

/// Mean squared error between a prediction and a constant target.
pub fn mse_on<'t>(pred: Tv<'t>, target: &Tensor, tape: &'t Tape) -> Tv<'t> {
    let t = tape.constant(target.clone());
    let d = pred - t;
    (d * d).mean()
}

/// Quadratic hinge keeping exponents away from their bounds: zero in
/// the interior, growing once an exponent comes within `margin` of
/// either end of `[0.3, 5.0]`. Summed over scales.
pub fn extreme_beta_loss<R: Real>(betas: &[R], margin: f64) -> R {
    let proto = betas[0];
    let hi = BETA_MAX - margin;
    let lo = BETA_MIN + margin;
    let mut acc = proto.lit(0.0);
    for b in betas {
        let over = (*b - proto.lit(hi)).maxc(0.0);
        let under = (proto.lit(lo) - *b).maxc(0.0);
        acc = acc + over * over + under * under;
    }
    acc
}

/// Alignment of a hypernet fit to the offline grid fit on the same
/// spectrum: mean of squared log-knee differences and squared
/// exponent differences over the 2K-1 predicted quantities.
pub fn hyp_alignment_loss<R: Real>(fit: &PiecewiseFit<R>, teacher: &PiecewiseFit<f64>) -> Result<R> {
    if fit.k() != teacher.k() {
        return Err(Error::param(format!("fits disagree on K: {} vs {}", fit.k(), teacher.k())));
    }
    let proto = fit.betas[0];
    let mut acc = proto.lit(0.0);
    for (knee, t_knee) in fit.knees.iter().zip(teacher.knees.iter()) {
        let d = knee.ln() - proto.lit(t_knee.ln());
        acc = acc + d * d;
    }
    for (beta, t_beta) in fit.betas.iter().zip(teacher.betas.iter()) {
        let d = *beta - proto.lit(*t_beta);
        acc = acc + d * d;
    }
    let n = (2 * fit.k() - 1) as f64;
    Ok(acc * proto.lit(1.0 / n))
}

/// Drift-intervention discrepancy `lambda * (1 - CKA)` between paired
/// embedding batches, differentiable through both.
pub fn drift_intervention_loss_on<'t>(tape: &'t Tape, z_full: Tv<'t>, z_trunc: Tv<'t>, lambda: f64) -> Result<Tv<'t>> {
    let shape = z_full.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::param("drift intervention needs a batch of at least 2 embeddings"));
    }
    let cka = linear_cka_on(tape, z_full, z_trunc);
    Ok((tape.scalar(1.0) - cka).mul_scalar(tape.scalar(lambda)))
}

/// Value-level drift discrepancy.
pub fn drift_intervention_loss(z_full: &Tensor, z_trunc: &Tensor, lambda: f64) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.constant(z_full.clone());
    let b = tape.constant(z_trunc.clone());
    Ok(drift_intervention_loss_on(&tape, a, b, lambda)?.value())
}

/// Unweighted term values feeding [`compose_total`]. `None` means the
/// term is inactive this step (its weight is zero or its inputs are
/// absent); inactive terms contribute no graph at all.
pub struct LossTerms<'t> {
    pub task: Tv<'t>,
    pub fit: Option<Tv<'t>>,
    pub seam: Option<Tv<'t>>,
    pub delta_anchor: Option<Tv<'t>>,
    pub a_scale: Option<Tv<'t>>,
    pub hyp: Option<Tv<'t>>,
    pub beta: Option<Tv<'t>>,
    pub drift: Option<Tv<'t>>,
}

/// Weighted sum of the active terms. The anchor, decay, and drift
/// terms arrive already weighted (their operations take the weight as
/// an argument), so they enter with multiplier 1 but are still gated
/// on their configured weight; the spectral terms are weighted here.
/// A term with weight zero contributes nothing to the graph, so a run
/// with all auxiliaries at zero is identical to a pure-task run.
pub fn compose_total<'t>(tape: &'t Tape, terms: &LossTerms<'t>, w: &LossWeights) -> (Tv<'t>, LossComponents) {
    let mut total = terms.task;
    let mut comps = LossComponents { task: terms.task.value(), ..Default::default() };
    let add = |total: &mut Tv<'t>, term: Option<Tv<'t>>, gate: f64, mult: f64, slot: &mut f64| {
        if let Some(t) = term {
            if gate != 0.0 {
                let wt = if mult == 1.0 { t } else { t.mul_scalar(tape.scalar(mult)) };
                *slot = wt.value();
                *total = *total + wt;
            }
        }
    };
    add(&mut total, terms.fit, w.w_fit, w.w_fit, &mut comps.fit);
    add(&mut total, terms.seam, w.w_seam, w.w_seam, &mut comps.seam);
    add(&mut total, terms.delta_anchor, w.lambda_delta, 1.0, &mut comps.delta_anchor);
    add(&mut total, terms.a_scale, w.lambda_a, 1.0, &mut comps.a_scale);
    add(&mut total, terms.hyp, w.w_hyp, w.w_hyp, &mut comps.hyp);
    add(&mut total, terms.beta, w.lambda_beta, w.lambda_beta, &mut comps.beta);
    add(&mut total, terms.drift, w.lambda_drift, 1.0, &mut comps.drift);
    comps.total = total.value();
    (total, comps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_binary_is_ln2() {
        let l = task_loss_classification(&[0.3, 0.3], 1, 0.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn full_smoothing_ignores_labels() {
        let logits = [1.0, -0.4, 0.2];
        let a = task_loss_classification(&logits, 0, 1.0).unwrap();
        let b = task_loss_classification(&logits, 2, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn smoothed_loss_respects_gibbs_floor() {
        let eps = 0.1;
        let floor = smoothed_loss_floor(eps, 2);
        // confident correct logits across a margin sweep
        for margin in [2.0, 5.0, 10.0, 30.0] {
            let l = task_loss_classification(&[margin, 0.0], 0, eps).unwrap();
            assert!(l >= floor - 1e-12, "margin {margin}: {l} < floor {floor}");
        }
        // the floor is attained when the predictive matches the target
        let q = [1.0 - eps + eps / 2.0, eps / 2.0];
        let logits = [q[0].ln(), q[1].ln()];
        let l = task_loss_classification(&logits, 0, eps).unwrap();
        assert!((l - floor).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        assert!(task_loss_classification(&[0.0, 0.0], 2, 0.1).is_err());
    }

    #[test]
    fn beta_hinge_values() {
        assert_eq!(extreme_beta_loss(&[2.0], 0.2), 0.0);
        let at_top = extreme_beta_loss(&[5.0], 0.2);
        assert!((at_top - 0.04) < 1e-12 && (at_top - 0.04) > -1e-12);
        let near_bottom = extreme_beta_loss(&[0.4], 0.2);
        assert!((near_bottom - 0.01).abs() < 1e-12);
        // sums over scales
        let both = extreme_beta_loss(&[5.0, 0.4, 2.0], 0.2);
        assert!((both - 0.05).abs() < 1e-12);
    }

    fn fit_with(knees: Vec<f64>, betas: Vec<f64>) -> PiecewiseFit<f64> {
        let k = betas.len();
        PiecewiseFit { knees, betas, log_amplitudes: vec![0.0; k], f_min: 0.004, f_max: 0.5 }
    }

    #[test]
    fn alignment_zero_offset_and_symmetry() {
        let a = fit_with(vec![0.02, 0.1], vec![2.0, 1.0, 0.5]);
        assert!(hyp_alignment_loss(&a, &a).unwrap().abs() < 1e-15);
        // one knee off by a factor e contributes 1/(2K-1)
        let mut b = a.clone();
        b.knees[0] *= std::f64::consts::E;
        let v = hyp_alignment_loss(&b, &a).unwrap();
        assert!((v - 1.0 / 5.0).abs() < 1e-9, "{v}");
        let sym = hyp_alignment_loss(&a, &b).unwrap();
        assert!((v - sym).abs() < 1e-12);
        // K mismatch is an error
        let c = fit_with(vec![0.02], vec![2.0, 1.0]);
        assert!(hyp_alignment_loss(&c, &a).is_err());
    }

    #[test]
    fn drift_loss_zero_rotation_invariant_and_positive_for_noise() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 64;
        let p = 6;
        let z = Tensor::matrix(n, p, (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect());
        assert!(drift_intervention_loss(&z, &z, 2.0).unwrap().abs() < 1e-12);
        // plane rotation in the first two feature dims
        let th = 0.83f64;
        let mut rot = z.clone();
        for i in 0..n {
            let a = z.at2(i, 0);
            let b = z.at2(i, 1);
            rot.data[i * p] = th.cos() * a - th.sin() * b;
            rot.data[i * p + 1] = th.sin() * a + th.cos() * b;
        }
        assert!(drift_intervention_loss(&z, &rot, 1.0).unwrap().abs() < 1e-10);
        // independent noise: discrepancy close to lambda
        let w = Tensor::matrix(n, p, (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let v = drift_intervention_loss(&z, &w, 0.7).unwrap();
        assert!(v > 0.5 * 0.7, "{v}");
        // undefined for singleton batches
        let s = Tensor::matrix(1, p, vec![0.0; p]);
        assert!(drift_intervention_loss(&s, &s, 1.0).is_err());
    }

    #[test]
    fn compose_total_identity_and_zero_aux() {
        let tape = Tape::new();
        let terms = LossTerms {
            task: tape.scalar(1.25),
            fit: Some(tape.scalar(0.5)),
            seam: Some(tape.scalar(0.25)),
            delta_anchor: Some(tape.scalar(0.1)),
            a_scale: Some(tape.scalar(0.05)),
            hyp: Some(tape.scalar(0.3)),
            beta: Some(tape.scalar(0.02)),
            drift: None,
        };
        let w = LossWeights::default();
        let (total, comps) = compose_total(&tape, &terms, &w);
        assert!((comps.total - comps.sum_of_parts()).abs() < 1e-12);
        assert!((total.value() - comps.total).abs() < 1e-15);
        // zero auxiliary weights reduce to the bare task loss
        let (t2, c2) = compose_total(&tape, &terms, &LossWeights::task_only());
        assert_eq!(t2.value(), 1.25);
        assert_eq!(c2.sum_of_parts(), 1.25);
        assert_eq!(c2.fit, 0.0);
    }
}
