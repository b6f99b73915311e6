//! Backbone forward pass.
//!
//! Per block: pre-norm -> shared input projections -> per-head
//! discretized scans with scale-shared steps -> within-scale state
//! averaging -> per-timestep cross-scale attention (scale axis only,
//! no cross-time mixing) -> residual -> pre-norm gated MLP -> residual.
//! Temporal mean pooling feeds a linear task head.
//!
//! The differentiable path lives on the tape; a small value-level scan
//! is kept as an independent reference for tests and kernel
//! extraction.

use super::params::{DeltaMode, Model};
use crate::engine::{Tape, Tensor, Tv};
use crate::error::{Error, Result};
use crate::scalemap::{assign_scales, ScaleBinding};
use crate::spectral::{consensus_fit, hypernet_forward_on, HyperNetVars, PiecewiseFit, Spectrum};

const RMS_EPS: f64 = 1e-8;

/// RevIN floor for the per-window standard deviation.
pub const REVIN_EPS: f64 = 1e-5;

/// Zero-order-hold style discretization of a scalar decay: returns
/// `(exp(delta * a), delta)` where the second factor scales the input.
pub fn discretize(a: f64, delta: f64) -> (f64, f64) {
    ((delta * a).exp(), delta)
}

/// Value-level selective scan for a single head with scalar decay:
/// `h_t = exp(delta a) h_{t-1} + delta * b_t u_t^T`, `y_t = c_t^T h_t`,
/// starting from `h_0 = 0`. `u` carries the head channels, `b`/`c` the
/// per-timestep input-dependent projections.
pub fn ssm_scan(a: f64, delta: f64, u: &[Vec<f64>], b: &[Vec<f64>], c: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if u.len() != b.len() || u.len() != c.len() {
        return Err(Error::shape("scan inputs disagree on T"));
    }
    if u.is_empty() {
        return Ok(vec![]);
    }
    let n = b[0].len();
    let dh = u[0].len();
    let abar = (delta * a).exp();
    let mut h = vec![0.0; n * dh];
    let mut ys = Vec::with_capacity(u.len());
    for t in 0..u.len() {
        for i in 0..n {
            for j in 0..dh {
                h[i * dh + j] = abar * h[i * dh + j] + delta * b[t][i] * u[t][j];
            }
        }
        let mut y = vec![0.0; dh];
        for i in 0..n {
            for j in 0..dh {
                y[j] += c[t][i] * h[i * dh + j];
            }
        }
        ys.push(y);
    }
    Ok(ys)
}

/// Arithmetic mean of head states within each scale group.
pub fn scale_aggregate(head_states: &[Vec<f64>], grouping: &[usize], n_scales: usize) -> Result<Vec<Vec<f64>>> {
    if head_states.len() != grouping.len() {
        return Err(Error::shape("one grouping entry per head required"));
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n_scales);
    for k in 0..n_scales {
        let members: Vec<usize> = (0..head_states.len()).filter(|&j| grouping[j] == k).collect();
        if members.is_empty() {
            return Err(Error::param(format!("scale group {k} has no heads")));
        }
        let mut acc = vec![0.0; head_states[members[0]].len()];
        for &j in &members {
            for (a, v) in acc.iter_mut().zip(head_states[j].iter()) {
                *a += v;
            }
        }
        let inv = 1.0 / members.len() as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Per-window, per-variable normalization over time (population std,
/// floored). Returns the normalized window and the statistics needed
/// to invert.
pub fn revin_apply(x: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (t, d) = (x.rows(), x.cols());
    let mut mu = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    for j in 0..d {
        let mut m = 0.0;
        for i in 0..t {
            m += x.at2(i, j);
        }
        m /= t as f64;
        let mut v = 0.0;
        for i in 0..t {
            let e = x.at2(i, j) - m;
            v += e * e;
        }
        mu[j] = m;
        sigma[j] = (v / t as f64).sqrt().max(REVIN_EPS);
    }
    let mut data = vec![0.0; t * d];
    for i in 0..t {
        for j in 0..d {
            data[i * d + j] = (x.at2(i, j) - mu[j]) / sigma[j];
        }
    }
    (Tensor::matrix(t, d, data), mu, sigma)
}

/// Exact affine inverse of [`revin_apply`] using the same statistics.
pub fn revin_invert(y: &Tensor, mu: &[f64], sigma: &[f64]) -> Tensor {
    let (t, d) = (y.rows(), y.cols());
    debug_assert_eq!(d, mu.len());
    let mut data = vec![0.0; t * d];
    for i in 0..t {
        for j in 0..d {
            data[i * d + j] = y.at2(i, j) * sigma[j] + mu[j];
        }
    }
    Tensor::matrix(t, d, data)
}

/// Decay-scale penalty `lambda * (ln(mean_j |A_j|) - ln a0)^2` with
/// `|A_j| = exp(a_log_j)`.
pub fn a_scale_loss(a_logs: &[f64], a0: f64, lambda: f64) -> Result<f64> {
    if !(a0 > 0.0) {
        return Err(Error::param(format!("a0 must be positive, got {a0}")));
    }
    let mean: f64 = a_logs.iter().map(|l| l.exp()).sum::<f64>() / a_logs.len() as f64;
    let c = mean.ln() - a0.ln();
    Ok(lambda * c * c)
}

/// Everything the training loop needs from one sequence's forward.
pub struct ForwardPass<'t> {
    /// Task output: class logits, flat forecast, or a (T, d)
    /// reconstruction depending on the configured head.
    pub prediction: Tv<'t>,
    /// Temporal mean of the final hidden sequence.
    pub pooled: Tv<'t>,
    pub final_hidden: Tv<'t>,
    /// Consensus spectral fit (spectrum mode only).
    pub fit: Option<PiecewiseFit<Tv<'t>>>,
    /// Ordered scale binding (spectrum mode only).
    pub binding: Option<ScaleBinding<Tv<'t>>>,
    /// Ordered steps actually used by the scan, fast to slow.
    pub deltas: Vec<Tv<'t>>,
    /// Per-scale output sequences of the last block (K entries, T x dh).
    pub scale_outputs: Vec<Tv<'t>>,
}

/// Model bound onto a tape for one forward/backward pass.
pub struct BoundModel<'m, 't> {
    pub model: &'m Model,
    pub leaves: Vec<Tv<'t>>,
    tape: &'t Tape,
}

impl<'m, 't> BoundModel<'m, 't> {
    pub fn new(tape: &'t Tape, model: &'m Model, trainable: bool) -> Self {
        let leaves = model.bind(tape, trainable);
        BoundModel { model, leaves, tape }
    }

    /// Binds to existing leaves (same order as `model.tensors`); lets a
    /// gradient checker own the parameter nodes.
    pub fn with_leaves(tape: &'t Tape, model: &'m Model, leaves: Vec<Tv<'t>>) -> Self {
        debug_assert_eq!(leaves.len(), model.tensors.len());
        BoundModel { model, leaves, tape }
    }

    fn rms_norm(&self, x: Tv<'t>, gain: Tv<'t>) -> Tv<'t> {
        let rows = x.shape()[0];
        let ms = (x * x).mean_axis1();
        let eps = self.tape.constant(Tensor::vector(vec![RMS_EPS; rows]));
        let rinv = (ms + eps).powc(-0.5);
        x.mul_col(rinv).mul_row(gain)
    }

    /// Steps for this sequence, fast to slow, on the tape.
    pub fn resolve_deltas(
        &self,
        spectra: Option<&[Spectrum]>,
    ) -> Result<(Vec<Tv<'t>>, Option<PiecewiseFit<Tv<'t>>>, Option<ScaleBinding<Tv<'t>>>)> {
        let cfg = &self.model.config;
        let k = cfg.n_scales;
        let (dmin, dmax) = cfg.scale_opts.delta_bounds(cfg.acquisition_step);
        match cfg.delta_mode {
            DeltaMode::Spectrum => {
                let spectra = spectra.ok_or_else(|| {
                    Error::param("spectrum mode requires per-channel spectra for the sequence")
                })?;
                let idx = self.model.layout.hypernet.expect("spectrum mode has hypernet params");
                let vars = HyperNetVars {
                    k,
                    n_features: cfg.hypernet_features,
                    w1: self.leaves[idx[0]],
                    b1: self.leaves[idx[1]],
                    w2: self.leaves[idx[2]],
                    b2: self.leaves[idx[3]],
                    w_out: self.leaves[idx[4]],
                    b_out: self.leaves[idx[5]],
                };
                let fits: Vec<PiecewiseFit<Tv<'t>>> =
                    spectra.iter().map(|sp| hypernet_forward_on(self.tape, &vars, sp)).collect();
                let fit = consensus_fit(&fits)?;
                let binding = assign_scales(&fit, &cfg.scale_opts, cfg.acquisition_step)?;
                Ok((binding.deltas.clone(), Some(fit), Some(binding)))
            }
            DeltaMode::Learnable => {
                let ld = self.leaves[self.model.layout.log_delta.expect("learnable mode has log_delta")];
                let mut ds: Vec<Tv<'t>> = (0..k).map(|i| ld.index(i).exp().clampc(dmin, dmax)).collect();
                ds.sort_by(|a, b| b.value().partial_cmp(&a.value()).unwrap());
                Ok((ds, None, None))
            }
            DeltaMode::SingleScale => {
                let ld = self.leaves[self.model.layout.log_delta.expect("single-scale mode has log_delta")];
                let d0 = ld.index(0).exp().clampc(dmin, dmax);
                Ok((vec![d0; k], None, None))
            }
            DeltaMode::Random => {
                let fixed = self.model.fixed_deltas.as_ref().expect("random mode has fixed deltas");
                Ok((fixed.iter().map(|&d| self.tape.scalar(d)).collect(), None, None))
            }
        }
    }

    /// Forward one sequence. `spectra` carries the per-channel spectral
    /// context (which may come from a longer window than `x` itself).
    pub fn forward(&self, x: &Tensor, spectra: Option<&[Spectrum]>) -> Result<ForwardPass<'t>> {
        let cfg = &self.model.config;
        let (t_len, d_in) = x.check_matrix()?;
        if t_len == 0 {
            return Err(Error::param("empty sequence"));
        }
        if d_in != cfg.in_dim {
            return Err(Error::shape(format!("expected {} channels, got {d_in}", cfg.in_dim)));
        }
        let (deltas, fit, binding) = self.resolve_deltas(spectra)?;

        let tape = self.tape;
        let lay = &self.model.layout;
        let lv = &self.leaves;
        let (h_heads, k_scales) = (cfg.n_heads, cfg.n_scales);
        let per_scale = cfg.heads_per_scale();
        let (n_state, dh) = (cfg.state_dim, cfg.head_dim);

        let x_in = tape.constant(x.clone());
        let mut x_cur = x_in.matmul(lv[lay.embed_w]).add_row(lv[lay.embed_b]);

        let inv_g = tape.scalar(1.0 / per_scale as f64);
        let inv_sqrt = tape.scalar(1.0 / (dh as f64).sqrt());

        let mut scale_outputs: Vec<Tv<'t>> = Vec::new();
        for blk in &lay.blocks {
            let xn = self.rms_norm(x_cur, lv[blk.norm_ssm]);
            let u = xn.matmul(lv[blk.w_u]);
            let bmat = xn.matmul(lv[blk.w_b]);
            let cmat = xn.matmul(lv[blk.w_c]);

            // per-head discrete decay factors exp(delta_k * A_j)
            let abars: Vec<Tv<'t>> = (0..h_heads)
                .map(|j| {
                    let a = -lv[blk.a_log].index(j).exp();
                    (deltas[self.model.grouping[j]] * a).exp()
                })
                .collect();

            let mut h_prev: Vec<Option<Tv<'t>>> = vec![None; h_heads];
            let mut fused_rows: Vec<Tv<'t>> = Vec::with_capacity(t_len);
            let mut token_rows: Vec<Vec<Tv<'t>>> = vec![Vec::with_capacity(t_len); k_scales];
            for t in 0..t_len {
                let b_t = bmat.row(t);
                let u_t = u.row(t);
                let c_t = cmat.row(t).reshape(vec![1, n_state]);
                let drive = b_t.outer(u_t);
                let inputs: Vec<Tv<'t>> = (0..k_scales).map(|k| drive.mul_scalar(deltas[k])).collect();
                for j in 0..h_heads {
                    let inp = inputs[self.model.grouping[j]];
                    h_prev[j] = Some(match h_prev[j] {
                        None => inp,
                        Some(h) => h.mul_scalar(abars[j]) + inp,
                    });
                }
                let mut tokens: Vec<Tv<'t>> = Vec::with_capacity(k_scales);
                for k in 0..k_scales {
                    let mut agg = h_prev[k * per_scale].unwrap();
                    for j in 1..per_scale {
                        agg = agg + h_prev[k * per_scale + j].unwrap();
                    }
                    let agg = agg.mul_scalar(inv_g);
                    let y = c_t.matmul(agg).reshape(vec![dh]);
                    token_rows[k].push(y);
                    tokens.push(y);
                }
                let s = tape.stack_rows(&tokens);
                let q = s.matmul(lv[blk.wq]);
                let km = s.matmul(lv[blk.wk]);
                let v = s.matmul(lv[blk.wv]);
                let attn = q.matmul_nt(km).mul_scalar(inv_sqrt).softmax();
                let fused = attn.matmul(v).reshape(vec![1, k_scales * dh]).matmul(lv[blk.w_fuse]).reshape(vec![cfg.d_model]);
                fused_rows.push(fused);
            }
            x_cur = x_cur + tape.stack_rows(&fused_rows);

            let mn = self.rms_norm(x_cur, lv[blk.norm_mlp]);
            let gate = mn.matmul(lv[blk.w_gate]).add_row(lv[blk.b_gate]).silu();
            let lin = mn.matmul(lv[blk.w_in]).add_row(lv[blk.b_in]);
            let mlp = (gate * lin).matmul(lv[blk.w_out]).add_row(lv[blk.b_out]);
            x_cur = x_cur + mlp;

            scale_outputs = token_rows.iter().map(|rows| tape.stack_rows(rows)).collect();
        }

        let final_hidden = self.rms_norm(x_cur, lv[lay.norm_final]);
        let pooled = final_hidden.mean_axis0();
        let prediction = match cfg.head {
            super::params::TaskHead::Reconstruct => final_hidden.matmul(lv[lay.head_w]).add_row(lv[lay.head_b]),
            _ => pooled
                .reshape(vec![1, cfg.d_model])
                .matmul(lv[lay.head_w])
                .add_row(lv[lay.head_b])
                .reshape(vec![cfg.out_dim()]),
        };
        Ok(ForwardPass { prediction, pooled, final_hidden, fit, binding, deltas, scale_outputs })
    }

    /// Tape-side decay anchoring across all blocks' heads.
    pub fn a_scale_loss_on(&self, lambda: f64) -> Tv<'t> {
        let logs: Vec<Tv<'t>> = self.model.layout.blocks.iter().map(|b| self.leaves[b.a_log]).collect();
        let all = self.tape.concat(&logs);
        let c = all.exp().mean().ln() - self.tape.scalar(self.model.a0.ln());
        c * c * self.tape.scalar(lambda)
    }
}

/// Value-level latent summary of a forward pass.
#[derive(Debug, Clone)]
pub struct LatentStates {
    pub pooled: Vec<f64>,
    pub final_hidden: Tensor,
    /// Per-scale output sequences of the last block, each (T, dh).
    pub scale_outputs: Vec<Tensor>,
    pub deltas: Vec<f64>,
}

/// Value-level forward: builds a scratch tape, returns latents and the
/// prediction. Deterministic given `(model, x, spectra)`.
pub fn backbone_forward(model: &Model, x: &Tensor, spectra: Option<&[Spectrum]>) -> Result<(LatentStates, Tensor)> {
    let tape = Tape::new();
    let bound = BoundModel::new(&tape, model, false);
    let pass = bound.forward(x, spectra)?;
    let latents = LatentStates {
        pooled: pass.pooled.clone_tensor().data,
        final_hidden: pass.final_hidden.clone_tensor(),
        scale_outputs: pass.scale_outputs.iter().map(|s| s.clone_tensor()).collect(),
        deltas: pass.deltas.iter().map(|d| d.value()).collect(),
    };
    Ok((latents, pass.prediction.clone_tensor()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msssm::params::{BackboneConfig, DeltaMode, Model, TaskHead};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn discretize_limits() {
        assert_eq!(discretize(0.0, 1.0).0, 1.0); // pure accumulator limit
        assert!((discretize(-1.0, 1.0).0 - (-1.0f64).exp()).abs() < 1e-15);
        assert!(discretize(-1e9, 1.0).0 < 1e-300); // memoryless limit
    }

    #[test]
    fn scan_impulse_response_is_exponential() {
        // scalar head, fixed b = c = 1, delta = 1, a = -1
        let t = 8;
        let mut u = vec![vec![0.0]; t];
        u[0][0] = 1.0;
        let b = vec![vec![1.0]; t];
        let c = vec![vec![1.0]; t];
        let ys = ssm_scan(-1.0, 1.0, &u, &b, &c).unwrap();
        for (l, y) in ys.iter().enumerate() {
            assert!((y[0] - (-(l as f64)).exp()).abs() < 1e-12, "lag {l}");
        }
    }

    #[test]
    fn scan_zero_input_and_superposition() {
        let t = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mk = |rng: &mut ChaCha8Rng, w: usize| -> Vec<Vec<f64>> {
            (0..t).map(|_| (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let b = mk(&mut rng, 3);
        let c = mk(&mut rng, 3);
        let zero = vec![vec![0.0; 2]; t];
        for y in ssm_scan(-0.5, 0.7, &zero, &b, &c).unwrap() {
            assert!(y.iter().all(|v| *v == 0.0));
        }
        let x1 = mk(&mut rng, 2);
        let x2 = mk(&mut rng, 2);
        let sum: Vec<Vec<f64>> = x1
            .iter()
            .zip(x2.iter())
            .map(|(a, b)| a.iter().zip(b.iter()).map(|(p, q)| p + q).collect())
            .collect();
        let y1 = ssm_scan(-0.5, 0.7, &x1, &b, &c).unwrap();
        let y2 = ssm_scan(-0.5, 0.7, &x2, &b, &c).unwrap();
        let ys = ssm_scan(-0.5, 0.7, &sum, &b, &c).unwrap();
        for t in 0..ys.len() {
            for j in 0..2 {
                assert!((ys[t][j] - y1[t][j] - y2[t][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_mean_and_errors() {
        let states = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![-1.0, -2.0], vec![1.0, 2.0]];
        let agg = scale_aggregate(&states, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(agg[0], vec![2.0, 3.0]);
        assert_eq!(agg[1], vec![0.0, 0.0]);
        // identical heads equal any member; singleton group is identity
        let same = scale_aggregate(&states[..2].to_vec(), &[0, 1], 2).unwrap();
        assert_eq!(same[0], states[0]);
        assert!(scale_aggregate(&states, &[0, 0, 0, 0], 2).is_err());
    }

    #[test]
    fn revin_roundtrip_and_example() {
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]);
        let (xn, mu, sigma) = revin_apply(&x);
        assert!((mu[0] - 2.0).abs() < 1e-15);
        assert!((sigma[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((xn.at2(0, 0) + 1.224744871391589).abs() < 1e-9);
        let back = revin_invert(&xn, &mu, &sigma);
        for (a, b) in back.data.iter().zip(x.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // constant window: zeros out, inverts back to the constant
        let c = Tensor::matrix(4, 1, vec![7.0; 4]);
        let (cn, cm, cs) = revin_apply(&c);
        assert!(cn.data.iter().all(|v| v.abs() < 1e-12));
        let back = revin_invert(&cn, &cm, &cs);
        assert!(back.data.iter().all(|v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn a_scale_loss_values() {
        let logs: Vec<f64> = vec![-1.0, -2.0, -0.5];
        let a0 = logs.iter().map(|l| l.exp()).sum::<f64>() / 3.0;
        assert!(a_scale_loss(&logs, a0, 0.1).unwrap().abs() < 1e-15);
        let scaled: Vec<f64> = logs.iter().map(|l| l + 1.0).collect();
        let v = a_scale_loss(&scaled, a0, 0.5).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    fn random_input(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(t, d, (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = BackboneConfig {
            delta_mode: DeltaMode::Random,
            ..BackboneConfig::desk(3, TaskHead::Classify { n_classes: 4 })
        };
        let model = Model::init(cfg, 5).unwrap();
        let x = random_input(20, 3, 1);
        let (lat, pred) = backbone_forward(&model, &x, None).unwrap();
        assert_eq!(pred.len(), 4);
        assert_eq!(lat.pooled.len(), 32);
        assert_eq!(lat.final_hidden.shape, vec![20, 32]);
        assert_eq!(lat.scale_outputs.len(), 3);
        assert_eq!(lat.deltas.len(), 3);
        let (_, pred2) = backbone_forward(&model, &x, None).unwrap();
        assert_eq!(pred.data, pred2.data);
        // batch duplication: independent sequences give identical outputs
        let (_, pred3) = backbone_forward(&model, &x.clone(), None).unwrap();
        assert_eq!(pred.data, pred3.data);
    }

    #[test]
    fn pooling_of_constant_hidden_is_that_constant() {
        // mean over axis 0 of a constant sequence equals the constant;
        // checked directly on the pooling primitive
        let tape = Tape::new();
        let h = tape.constant(Tensor::matrix(5, 3, vec![2.0, -1.0, 0.5].repeat(5)));
        let z = h.mean_axis0();
        assert_eq!(z.clone_tensor().data, vec![2.0, -1.0, 0.5]);
    }

    #[test]
    fn zero_branch_weights_make_blocks_identity() {
        let cfg = BackboneConfig {
            delta_mode: DeltaMode::Random,
            ..BackboneConfig::desk(2, TaskHead::Classify { n_classes: 2 })
        };
        let mut model = Model::init(cfg, 3).unwrap();
        // zero the branch outputs (attention fuse + MLP out) so blocks
        // reduce to their residual paths; make the final norm + head
        // transparent for inspection
        for bi in 0..model.layout.blocks.len() {
            let b = model.layout.blocks[bi].clone();
            for idx in [b.w_fuse, b.w_out, b.b_out] {
                for v in model.tensors[idx].data.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        let x = random_input(9, 2, 2);
        let tape = Tape::new();
        let bound = BoundModel::new(&tape, &model, false);
        let pass = bound.forward(&x, None).unwrap();
        // embedding output should flow through both blocks unchanged
        let lv = &bound.leaves;
        let emb = tape
            .constant(x.clone())
            .matmul(lv[model.layout.embed_w])
            .add_row(lv[model.layout.embed_b]);
        let expected = emb.clone_tensor();
        // final_hidden applies the last norm; compare pre-norm stream by
        // re-normalizing the expected embedding
        let normed = bound.rms_norm(tape.constant(expected), lv[model.layout.norm_final]);
        let got = pass.final_hidden.clone_tensor();
        for (a, b) in got.data.iter().zip(normed.clone_tensor().data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_finite_on_random_draws() {
        let cfg = BackboneConfig {
            delta_mode: DeltaMode::Random,
            ..BackboneConfig::desk(2, TaskHead::Classify { n_classes: 2 })
        };
        for seed in 0..30 {
            let model = Model::init(cfg.clone(), seed).unwrap();
            let x = random_input(16, 2, seed ^ 0xff);
            let (_, pred) = backbone_forward(&model, &x, None).unwrap();
            assert!(pred.all_finite(), "seed {seed}");
        }
    }

    #[test]
    fn tape_scan_matches_reference_scan() {
        // one head, fixed projections: the graph recurrence must equal
        // the value-level scan exactly
        let t_len = 10;
        let (n, dh) = (3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mk = |w: usize| -> Vec<Vec<f64>> {
            (0..t_len).map(|_| (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let u = mk(dh);
        let b = mk(n);
        let c = mk(n);
        let (a, delta) = (-0.8, 0.6);
        let reference = ssm_scan(a, delta, &u, &b, &c).unwrap();

        let tape = Tape::new();
        let d_node = tape.scalar(delta);
        let abar = tape.scalar((delta * a).exp());
        let mut h: Option<Tv<'_>> = None;
        for t in 0..t_len {
            let b_t = tape.constant(Tensor::vector(b[t].clone()));
            let u_t = tape.constant(Tensor::vector(u[t].clone()));
            let c_t = tape.constant(Tensor::vector(c[t].clone())).reshape(vec![1, n]);
            let drive = b_t.outer(u_t).mul_scalar(d_node);
            h = Some(match h {
                None => drive,
                Some(prev) => prev.mul_scalar(abar) + drive,
            });
            let y = c_t.matmul(h.unwrap()).reshape(vec![dh]).clone_tensor();
            for j in 0..dh {
                assert!((y.data[j] - reference[t][j]).abs() < 1e-12);
            }
        }
    }
}
