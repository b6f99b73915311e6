//! Numerical verification of the kernel-mismatch bound and the
//! exponential-mixture approximation rates, plus representation
//! similarity metrics (linear CKA, distance correlation, latent drift).

mod mixture;

pub use mixture::{approximation_rate_study, fit_exp_mixture, MixtureFit, MixtureFitConfig, RateStudy};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Tape, Tensor, Tv};
use crate::error::{Error, Result};
use crate::kernel::KernelProfile;
use crate::msssm::{backbone_forward, ssm_scan, Model, TaskHead};
use crate::spectral::{periodogram_channels, Spectrum};

/// Impulse response of a discretized head over `l` lags with frozen
/// projection vectors `b`, `c`: runs the same recurrence as the scan on
/// a unit impulse, so the two agree exactly.
pub fn extract_kernel(a: f64, delta: f64, b: &[f64], c: &[f64], l: usize, dt: f64) -> Result<KernelProfile> {
    if l == 0 {
        return Err(Error::param("kernel needs at least one lag"));
    }
    let mut u = vec![vec![0.0]; l];
    u[0][0] = 1.0;
    let bs = vec![b.to_vec(); l];
    let cs = vec![c.to_vec(); l];
    let ys = ssm_scan(a, delta, &u, &bs, &cs)?;
    KernelProfile::new(ys.iter().map(|y| y[0]).collect(), dt)
}

/// Riemann-sum L1 distance between two kernels. Grids must share `dt`
/// unless `resample` is set, in which case the second kernel is
/// linearly interpolated onto the first grid. Lengths may differ; the
/// shorter kernel is zero-extended.
pub fn l1_mismatch(g: &KernelProfile, g_tilde: &KernelProfile, resample: bool) -> Result<f64> {
    let same_grid = (g.dt - g_tilde.dt).abs() < 1e-12;
    if !same_grid && !resample {
        return Err(Error::param(format!(
            "kernel grids differ (dt {} vs {}); enable resampling",
            g.dt, g_tilde.dt
        )));
    }
    let n = if same_grid { g.len().max(g_tilde.len()) } else { g.len() };
    let mut acc = 0.0;
    for i in 0..n {
        let a = if i < g.len() { g.values[i] } else { 0.0 };
        let b = if same_grid {
            if i < g_tilde.len() {
                g_tilde.values[i]
            } else {
                0.0
            }
        } else {
            g_tilde.sample_at(i as f64 * g.dt)
        };
        acc += (a - b).abs();
    }
    Ok(acc * g.dt)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lemma1Report {
    /// `sup_t |h - h_tilde| / (M ||g - g_tilde||_1)`, maximized over
    /// the random signals. Always <= 1 when the convolution is right.
    pub max_ratio: f64,
    /// Ratio achieved by the constant witness `x = M`.
    pub witness_ratio: f64,
    pub bound: f64,
    pub n_signals: usize,
}

/// Monte Carlo check of the kernel mismatch bound
/// `sup |h - h_tilde| <= M ||g - g_tilde||_1` over random signals with
/// `|x|_inf <= M`, via discrete convolution on the shared grid.
pub fn verify_lemma1(
    g: &KernelProfile,
    g_tilde: &KernelProfile,
    n_signals: usize,
    m_bound: f64,
    t_len: usize,
    seed: u64,
) -> Result<Lemma1Report> {
    if (g.dt - g_tilde.dt).abs() > 1e-12 {
        return Err(Error::param("lemma check needs a shared kernel grid"));
    }
    let l = g.len().max(g_tilde.len());
    if t_len < l {
        return Err(Error::param(format!("signal length {t_len} shorter than kernel support {l}")));
    }
    let dt = g.dt;
    let bound = m_bound * l1_mismatch(g, g_tilde, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diff: Vec<f64> = (0..l)
        .map(|i| {
            let a = if i < g.len() { g.values[i] } else { 0.0 };
            let b = if i < g_tilde.len() { g_tilde.values[i] } else { 0.0 };
            a - b
        })
        .collect();
    // sup_t |(g - g_tilde) * x|(t) over the fully supported region
    let gap_for = |x: &[f64]| -> f64 {
        let mut worst = 0.0f64;
        for t in (l - 1)..t_len {
            let mut acc = 0.0;
            for (tau, d) in diff.iter().enumerate() {
                acc += d * x[t - tau];
            }
            worst = worst.max((acc * dt).abs());
        }
        worst
    };
    let mut max_ratio = 0.0f64;
    for _ in 0..n_signals {
        let x: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-m_bound..m_bound)).collect();
        let gap = gap_for(&x);
        let ratio = if bound > 0.0 { gap / bound } else { 0.0 };
        max_ratio = max_ratio.max(ratio);
    }
    let witness = vec![m_bound; t_len];
    let wgap = gap_for(&witness);
    let witness_ratio = if bound > 0.0 { wgap / bound } else { 0.0 };
    Ok(Lemma1Report { max_ratio, witness_ratio, bound, n_signals })
}

/// Linear (feature-space) CKA between two representation batches with
/// column centering: `||Xc'Yc||_F^2 / (||Xc'Xc||_F ||Yc'Yc||_F)`.
/// Returns 0 when either factor degenerates.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (nx, _p) = x.check_matrix()?;
    let (ny, _q) = y.check_matrix()?;
    if nx != ny {
        return Err(Error::param(format!("row counts differ: {nx} vs {ny}")));
    }
    if nx < 2 {
        return Err(Error::param("CKA needs at least 2 rows"));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let xty = crate::engine::matmul(&xc, true, &yc, false);
    let xtx = crate::engine::matmul(&xc, true, &xc, false);
    let yty = crate::engine::matmul(&yc, true, &yc, false);
    let num: f64 = xty.data.iter().map(|v| v * v).sum();
    let dx: f64 = xtx.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dy: f64 = yty.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dx == 0.0 || dy == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (dx * dy))
}

fn center_columns(x: &Tensor) -> Tensor {
    let (n, p) = (x.rows(), x.cols());
    let mut means = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            means[j] += x.at2(i, j);
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let mut data = x.data.clone();
    for i in 0..n {
        for j in 0..p {
            data[i * p + j] -= means[j];
        }
    }
    Tensor::matrix(n, p, data)
}

/// Differentiable linear CKA on the tape; same estimator as
/// [`linear_cka`]. The degenerate case detaches to zero.
pub fn linear_cka_on<'t>(tape: &'t Tape, x: Tv<'t>, y: Tv<'t>) -> Tv<'t> {
    let xc = x.add_row(-x.mean_axis0());
    let yc = y.add_row(-y.mean_axis0());
    let xty = xc.matmul_tn(yc);
    let xtx = xc.matmul_tn(xc);
    let yty = yc.matmul_tn(yc);
    let num = (xty * xty).sum();
    let dx = (xtx * xtx).sum().sqrt();
    let dy = (yty * yty).sum().sqrt();
    if dx.value() == 0.0 || dy.value() == 0.0 {
        return tape.scalar(0.0);
    }
    num / (dx * dy)
}

/// Distance correlation (V-statistic) between two batches via
/// double-centered pairwise Euclidean distance matrices. Returns 0
/// when either distance variance vanishes.
pub fn dcor(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (nx, _) = x.check_matrix()?;
    let (ny, _) = y.check_matrix()?;
    if nx != ny {
        return Err(Error::param(format!("row counts differ: {nx} vs {ny}")));
    }
    if nx < 2 {
        return Err(Error::param("dCor needs at least 2 rows"));
    }
    let a = centered_distance_matrix(x);
    let b = centered_distance_matrix(y);
    let n2 = (nx * nx) as f64;
    let dcov2: f64 = a.iter().zip(b.iter()).map(|(p, q)| p * q).sum::<f64>() / n2;
    let dvarx: f64 = a.iter().map(|p| p * p).sum::<f64>() / n2;
    let dvary: f64 = b.iter().map(|p| p * p).sum::<f64>() / n2;
    let den = (dvarx * dvary).sqrt();
    if den <= 0.0 {
        return Ok(0.0);
    }
    Ok((dcov2.max(0.0) / den).sqrt().min(1.0))
}

fn centered_distance_matrix(x: &Tensor) -> Vec<f64> {
    let (n, p) = (x.rows(), x.cols());
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut acc = 0.0;
            for k in 0..p {
                let e = x.at2(i, k) - x.at2(j, k);
                acc += e * e;
            }
            let v = acc.sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let mut row_mean = vec![0.0; n];
    let mut grand = 0.0;
    for i in 0..n {
        let s: f64 = d[i * n..(i + 1) * n].iter().sum();
        row_mean[i] = s / n as f64;
        grand += s;
    }
    grand /= (n * n) as f64;
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = d[i * n + j] - row_mean[i] - row_mean[j] + grand;
        }
    }
    d
}

/// Paired-condition drift metrics between two embedding batches:
/// (CKA, dCor, mean latent l2).
pub fn drift_metrics(za: &Tensor, zb: &Tensor) -> Result<(f64, f64, f64)> {
    let cka = linear_cka(za, zb)?;
    let dc = dcor(za, zb)?;
    let (n, p) = za.check_matrix()?;
    let (nb, pb) = zb.check_matrix()?;
    if n != nb || p != pb {
        return Err(Error::param("latent drift needs equal-shape paired embeddings"));
    }
    let mut acc = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..p {
            let e = za.at2(i, j) - zb.at2(i, j);
            s += e * e;
        }
        acc += s.sqrt();
    }
    Ok((cka, dc, acc / n as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub cka: f64,
    pub dcor: f64,
    pub mean_latent_l2: f64,
    /// `1 - similarity`, the discrepancy convention used throughout.
    pub drift_cka: f64,
    pub drift_dcor: f64,
    pub accuracy_full: Option<f64>,
    pub accuracy_truncated: Option<f64>,
}

/// Embeds paired full/truncated views of the same items under one
/// model and reports representation similarity, mean latent l2 drift,
/// and per-condition accuracy when labels are given. The spectral
/// context always comes from the full view, so truncation moves only
/// the backbone input.
pub fn drift_report(
    model: &Model,
    full: &[Tensor],
    truncated: &[Tensor],
    labels: Option<&[usize]>,
) -> Result<DriftReport> {
    if full.len() != truncated.len() || full.is_empty() {
        return Err(Error::param("drift report needs non-empty paired views"));
    }
    let d_model = model.config.d_model;
    let mut za = Vec::with_capacity(full.len() * d_model);
    let mut zb = Vec::with_capacity(full.len() * d_model);
    let mut correct_a = 0usize;
    let mut correct_b = 0usize;
    for (i, (xf, xt)) in full.iter().zip(truncated.iter()).enumerate() {
        let spectra = sequence_spectra(model, xf)?;
        let (la, pa) = backbone_forward(model, xf, spectra.as_deref())?;
        let (lb, pb) = backbone_forward(model, xt, spectra.as_deref())?;
        za.extend_from_slice(&la.pooled);
        zb.extend_from_slice(&lb.pooled);
        if let (Some(ls), TaskHead::Classify { .. }) = (labels, model.config.head) {
            if argmax(&pa.data) == ls[i] {
                correct_a += 1;
            }
            if argmax(&pb.data) == ls[i] {
                correct_b += 1;
            }
        }
    }
    let za = Tensor::matrix(full.len(), d_model, za);
    let zb = Tensor::matrix(full.len(), d_model, zb);
    let (cka, dc, l2) = drift_metrics(&za, &zb)?;
    let n = full.len() as f64;
    Ok(DriftReport {
        cka,
        dcor: dc,
        mean_latent_l2: l2,
        drift_cka: 1.0 - cka,
        drift_dcor: 1.0 - dc,
        accuracy_full: labels.map(|_| correct_a as f64 / n),
        accuracy_truncated: labels.map(|_| correct_b as f64 / n),
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-channel spectra of a sequence under the model's analysis band;
/// `None` unless the model derives its steps from the spectrum.
pub fn sequence_spectra(model: &Model, x: &Tensor) -> Result<Option<Vec<Spectrum>>> {
    if model.layout.hypernet.is_none() {
        return Ok(None);
    }
    let t = x.rows();
    let f_min = model.config.f_min.unwrap_or(1.0 / t as f64);
    let f_max = model.config.f_max.unwrap_or(0.5);
    Ok(Some(periodogram_channels(x, f_min, f_max)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signalgen::{exp_mixture_kernel, powerlaw_kernel};

    #[test]
    fn kernel_matches_analytic_exponential() {
        let k = extract_kernel(-1.0, 1.0, &[1.0], &[1.0], 16, 1.0).unwrap();
        for (l, v) in k.values.iter().enumerate() {
            assert!((v - (-(l as f64)).exp()).abs() < 1e-12);
        }
        // memoryless limit: only the instantaneous tap survives
        let k0 = extract_kernel(-1e6, 2.0, &[3.0], &[0.5], 5, 1.0).unwrap();
        assert!((k0.values[0] - 2.0 * 3.0 * 0.5).abs() < 1e-12);
        for v in &k0.values[1..] {
            assert_eq!(*v, 0.0);
        }
        // geometric decay is monotone for positive scalar projections
        let kd = extract_kernel(-0.3, 0.5, &[2.0], &[1.5], 50, 0.5).unwrap();
        for w in kd.values.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn l1_mismatch_properties() {
        let g = exp_mixture_kernel(&[1.0], &[1.0], 4000, 0.01).unwrap();
        assert_eq!(l1_mismatch(&g, &g, false).unwrap(), 0.0);
        // distance to zero approximates the analytic mass 1.0
        let zero = KernelProfile::new(vec![0.0; 1], 0.01).unwrap();
        let m = l1_mismatch(&g, &zero, false).unwrap();
        assert!((m - 1.0).abs() < 6e-3, "mass {m}");
        // triangle inequality on random profiles
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let mut mk = |rng: &mut ChaCha8Rng| {
                KernelProfile::new((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(), 0.1).unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let c = mk(&mut rng);
            let ab = l1_mismatch(&a, &b, false).unwrap();
            let bc = l1_mismatch(&b, &c, false).unwrap();
            let ac = l1_mismatch(&a, &c, false).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
        // grid mismatch is an error unless resampling is requested
        let fine = exp_mixture_kernel(&[1.0], &[1.0], 8000, 0.005).unwrap();
        assert!(l1_mismatch(&g, &fine, false).is_err());
        let resampled = l1_mismatch(&g, &fine, true).unwrap();
        assert!(resampled < 1e-6, "resampled distance {resampled}");
    }

    #[test]
    fn lemma_bound_holds_and_witness_is_tight() {
        let g = exp_mixture_kernel(&[1.0], &[1.0], 600, 0.05).unwrap();
        let zero = KernelProfile::new(vec![0.0; 600], 0.05).unwrap();
        let rep = verify_lemma1(&g, &zero, 200, 1.0, 1200, 7).unwrap();
        assert!(rep.max_ratio <= 1.0 + 1e-12, "ratio {}", rep.max_ratio);
        // g - g_tilde >= 0, so the constant witness x = M is an equality case
        assert!(rep.witness_ratio > 0.999999, "witness {}", rep.witness_ratio);
        // identical kernels: zero gap regardless of the signal
        let same = verify_lemma1(&g, &g, 50, 2.0, 1200, 7).unwrap();
        assert_eq!(same.max_ratio, 0.0);
    }

    #[test]
    fn cka_self_similarity_and_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::matrix(64, 8, (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect());
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        // isotropic scaling
        let y = Tensor::matrix(64, 8, x.data.iter().map(|v| 3.7 * v).collect());
        assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        // symmetric in arguments
        let z = Tensor::matrix(64, 8, (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let ab = linear_cka(&x, &z).unwrap();
        let ba = linear_cka(&z, &x).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        // degenerate input
        let c = Tensor::matrix(64, 8, vec![5.0; 512]);
        assert_eq!(linear_cka(&x, &c).unwrap(), 0.0);
        assert!(linear_cka(&x, &Tensor::matrix(32, 8, vec![0.0; 256])).is_err());
    }

    #[test]
    fn cka_tape_matches_value_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::matrix(32, 6, (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let y = Tensor::matrix(32, 5, (0..160).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let plain = linear_cka(&x, &y).unwrap();
        let tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let on = linear_cka_on(&tape, xv, yv).value();
        assert!((plain - on).abs() < 1e-12);
    }

    #[test]
    fn dcor_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::matrix(48, 4, (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect());
        assert!((dcor(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = Tensor::matrix(48, 4, vec![2.0; 192]);
        assert_eq!(dcor(&x, &c).unwrap(), 0.0);
        // symmetry
        let y = Tensor::matrix(48, 3, (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect());
        assert!((dcor(&x, &y).unwrap() - dcor(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dcor_full_rank_affine_similarity_near_one() {
        // exactness is a similarity-transform property, so the affine
        // map here is a scaled rotation plus a shift
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 96;
        let x = Tensor::matrix(n, 3, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let th = 0.9f64;
        let s = 2.3;
        let a = [
            [s * th.cos(), -s * th.sin(), 0.0],
            [s * th.sin(), s * th.cos(), 0.0],
            [0.0, 0.0, s],
        ];
        let b = [0.7, -1.2, 0.1];
        let mut ydata = vec![0.0; n * 3];
        for i in 0..n {
            for r in 0..3 {
                let mut acc = b[r];
                for c in 0..3 {
                    acc += a[r][c] * x.at2(i, c);
                }
                ydata[i * 3 + r] = acc;
            }
        }
        let y = Tensor::matrix(n, 3, ydata);
        let d = dcor(&x, &y).unwrap();
        assert!(d >= 0.999, "dcor {d}");
    }

    #[test]
    fn drift_metrics_identical_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor::matrix(40, 6, (0..240).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (cka, dc, l2) = drift_metrics(&z, &z.clone()).unwrap();
        assert!((cka - 1.0).abs() < 1e-12);
        assert!((dc - 1.0).abs() < 1e-12);
        assert_eq!(l2, 0.0);
    }

    #[test]
    fn powerlaw_mismatch_respects_bound() {
        // mismatch between a power-law kernel and one exponential
        let g = powerlaw_kernel(2.0, 800, 0.05).unwrap();
        let e = exp_mixture_kernel(&[1.0], &[1.2], 800, 0.05).unwrap();
        let rep = verify_lemma1(&g, &e, 100, 2.0, 1600, 9).unwrap();
        assert!(rep.max_ratio <= 1.0 + 1e-12);
        assert!(rep.bound > 0.0);
    }

    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
