//! Data preparation and the training loop.
//!
//! One loop owns the model. Each step rebuilds the graph: bind the
//! model once, forward every sequence in the batch, assemble the
//! composite loss (skipping zero-weight terms entirely), backward,
//! clip, AdamW update. Everything is deterministic given the seed.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    compose_total, mse_on, task_loss_classification_on, LossComponents, LossTerms, LossWeights,
};
use super::mask::{apply_mask, gen_mask, masked_fraction, MaskSpec};
use crate::analysis::{argmax, sequence_spectra};
use crate::engine::{AdamW, OptimConfig, Tape, Tensor, Tv};
use crate::error::{Error, Result};
use crate::msssm::{revin_apply, BoundModel, Model, TaskHead};
use crate::scalemap::delta_anchor_loss;
use crate::signalgen::{LabeledSequenceSet, Labels};
use crate::spectral::{consensus_fit, fit_loss, init_fit, seam_loss, PiecewiseFit, Spectrum};
use crate::train::loss::{drift_intervention_loss_on, extreme_beta_loss, hyp_alignment_loss};

/// Which part of each sequence the backbone sees; the spectral context
/// always comes from the full sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InputWindow {
    Full,
    /// First `ceil(frac * T)` samples.
    PrefixFraction(f64),
}

impl InputWindow {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            InputWindow::Full => x.clone(),
            InputWindow::PrefixFraction(frac) => prefix(x, *frac),
        }
    }
}

/// First `ceil(frac * T)` rows of a sequence.
pub fn prefix(x: &Tensor, frac: f64) -> Tensor {
    let t = x.rows();
    let keep = ((frac * t as f64).ceil() as usize).clamp(1, t);
    let d = x.cols();
    Tensor::matrix(keep, d, x.data[..keep * d].to_vec())
}

#[derive(Debug, Clone)]
pub enum Target {
    Class(usize),
    /// Raw-scale target block plus the window statistics that
    /// denormalize the prediction.
    Forecast { target: Tensor, mu: Vec<f64>, sigma: Vec<f64> },
    /// Reconstruction of the (unmasked) input under fresh masks.
    Reconstruct,
}

/// A dataset readied for the loop: backbone inputs, cached spectral
/// context, offline alignment teachers, and targets.
pub struct PreparedData {
    pub inputs: Vec<Tensor>,
    pub spectra: Vec<Option<Vec<Spectrum>>>,
    pub teachers: Vec<Option<PiecewiseFit<f64>>>,
    pub targets: Vec<Target>,
    pub n_classes: usize,
}

impl PreparedData {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> PreparedData {
        PreparedData {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            spectra: idx.iter().map(|&i| self.spectra[i].clone()).collect(),
            teachers: idx.iter().map(|&i| self.teachers[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            n_classes: self.n_classes,
        }
    }
}

fn spectral_cache(model: &Model, full: &Tensor, want_teacher: bool) -> Result<(Option<Vec<Spectrum>>, Option<PiecewiseFit<f64>>)> {
    let spectra = sequence_spectra(model, full)?;
    let teacher = match (&spectra, want_teacher) {
        (Some(sps), true) => {
            let fits: Vec<PiecewiseFit<f64>> =
                sps.iter().map(|sp| init_fit(sp, model.config.n_scales)).collect::<Result<_>>()?;
            Some(consensus_fit(&fits)?)
        }
        _ => None,
    };
    Ok((spectra, teacher))
}

/// Classification data: the backbone sees `window` of each sequence,
/// the spectral pipeline sees the full sequence.
pub fn prepare_classification(set: &LabeledSequenceSet, model: &Model, window: InputWindow) -> Result<PreparedData> {
    set.validate()?;
    let (labels, n_classes) = match &set.labels {
        Labels::Class { labels, n_classes } => (labels, *n_classes),
        _ => return Err(Error::data("classification needs class labels")),
    };
    let mut out = PreparedData {
        inputs: Vec::with_capacity(set.len()),
        spectra: Vec::with_capacity(set.len()),
        teachers: Vec::with_capacity(set.len()),
        targets: Vec::with_capacity(set.len()),
        n_classes,
    };
    for (x, &label) in set.sequences.iter().zip(labels.iter()) {
        let (spectra, teacher) = spectral_cache(model, x, true)?;
        out.inputs.push(window.apply(x));
        out.spectra.push(spectra);
        out.teachers.push(teacher);
        out.targets.push(Target::Class(label));
    }
    Ok(out)
}

/// Forecasting data: the last `horizon` rows of each sequence become
/// the target, the remainder is the input window, normalized per
/// window with the statistics kept for denormalization. The spectral
/// pipeline sees the pre-normalization input window.
pub fn prepare_forecast(set: &LabeledSequenceSet, model: &Model, horizon: usize) -> Result<PreparedData> {
    set.validate()?;
    let mut out = PreparedData {
        inputs: Vec::with_capacity(set.len()),
        spectra: Vec::with_capacity(set.len()),
        teachers: Vec::with_capacity(set.len()),
        targets: Vec::with_capacity(set.len()),
        n_classes: 0,
    };
    for x in &set.sequences {
        let t = x.rows();
        if t <= horizon + 3 {
            return Err(Error::data(format!("sequence length {t} too short for horizon {horizon}")));
        }
        let d = x.cols();
        let t_in = t - horizon;
        let input_raw = Tensor::matrix(t_in, d, x.data[..t_in * d].to_vec());
        let target = Tensor::matrix(horizon, d, x.data[t_in * d..].to_vec());
        let (spectra, teacher) = spectral_cache(model, &input_raw, true)?;
        let (input_norm, mu, sigma) = revin_apply(&input_raw);
        out.inputs.push(input_norm);
        out.spectra.push(spectra);
        out.teachers.push(teacher);
        out.targets.push(Target::Forecast { target, mu, sigma });
    }
    Ok(out)
}

/// Masked-reconstruction data; masks are drawn fresh every step.
pub fn prepare_pretrain(set: &LabeledSequenceSet, model: &Model) -> Result<PreparedData> {
    set.validate()?;
    let mut out = PreparedData {
        inputs: Vec::with_capacity(set.len()),
        spectra: Vec::with_capacity(set.len()),
        teachers: Vec::with_capacity(set.len()),
        targets: Vec::with_capacity(set.len()),
        n_classes: 0,
    };
    for x in &set.sequences {
        let (spectra, teacher) = spectral_cache(model, x, true)?;
        out.inputs.push(x.clone());
        out.spectra.push(spectra);
        out.teachers.push(teacher);
        out.targets.push(Target::Reconstruct);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub mask: MaskSpec,
    pub seed: u64,
    pub early_stop_patience: Option<usize>,
    /// Restore the parameters that scored best on validation once the
    /// loop ends.
    pub restore_best: bool,
    /// Truncated-view length for the drift intervention, as a fraction
    /// of each sequence.
    pub drift_prefix_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.1,
            warmup_frac: 0.1,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            mask: MaskSpec::default(),
            seed: 0,
            early_stop_patience: None,
            restore_best: false,
            drift_prefix_fraction: 1.0 / 8.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub task_metric: f64,
    pub comps: LossComponents,
    pub deltas: Vec<f64>,
    pub mean_log_abs_a: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub n_scales: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,task_metric,total,task,fit,seam,delta_anchor,a_scale,hyp,beta,drift");
        for k in 0..self.n_scales {
            s.push_str(&format!(",delta_{}", k + 1));
        }
        s.push_str(",mean_log_abs_a\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.split,
                e.task_metric,
                e.comps.total,
                e.comps.task,
                e.comps.fit,
                e.comps.seam,
                e.comps.delta_anchor,
                e.comps.a_scale,
                e.comps.hyp,
                e.comps.beta,
                e.comps.drift
            ));
            for k in 0..self.n_scales {
                s.push_str(&format!(",{}", e.deltas.get(k).copied().unwrap_or(f64::NAN)));
            }
            s.push_str(&format!(",{}\n", e.mean_log_abs_a));
        }
        s
    }
}

/// Mean of `ln mean_j |A_j|` over the model's blocks.
pub fn mean_log_abs_a(model: &Model) -> f64 {
    let mut acc = 0.0;
    for b in &model.layout.blocks {
        let t = &model.tensors[b.a_log];
        let mean: f64 = t.data.iter().map(|l| l.exp()).sum::<f64>() / t.len() as f64;
        acc += mean.ln();
    }
    acc / model.layout.blocks.len() as f64
}

fn metric_higher_is_better(head: TaskHead) -> bool {
    matches!(head, TaskHead::Classify { .. })
}

struct BatchOutcome {
    comps: LossComponents,
    correct: usize,
    counted: usize,
    metric_sum: f64,
    delta_sums: Vec<f64>,
    delta_count: usize,
}

/// Trains in place; returns the per-epoch metric log. Aborts with a
/// numeric error carrying the component values if the loss goes
/// non-finite.
pub fn train_loop(model: &mut Model, train: &PreparedData, val: Option<&PreparedData>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.weights.validate()?;
    cfg.mask.validate()?;
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let optim_cfg = OptimConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        clip_norm: Some(cfg.clip_norm),
        warmup_steps: (cfg.warmup_frac * total_steps as f64).round() as usize,
        total_steps,
        ..OptimConfig::default()
    };
    let mut opt = AdamW::new(optim_cfg, &model.tensors);
    let mut log = TrainLog { epochs: Vec::new(), n_scales: model.config.n_scales };
    let mut best_val: Option<f64> = None;
    let mut best_tensors: Option<Vec<Tensor>> = None;
    let mut since_best = 0usize;
    let higher_better = metric_higher_is_better(model.config.head);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x2545f491));
        order.shuffle(&mut shuffle_rng);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xabcd ^ epoch as u64);

        let mut epoch_comps = LossComponents::default();
        let mut epoch_correct = 0usize;
        let mut epoch_counted = 0usize;
        let mut epoch_metric_sum = 0.0;
        let mut delta_sums = vec![0.0; model.config.n_scales];
        let mut delta_count = 0usize;
        let mut n_batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let outcome = {
                let tape = Tape::new();
                let bound = BoundModel::new(&tape, model, true);
                let outcome = run_batch(&tape, &bound, train, chunk, cfg, &mut mask_rng)?;
                let out = match outcome {
                    Some((total, o)) => {
                        if !o.comps.total.is_finite() {
                            return Err(Error::numeric(format!(
                                "non-finite loss at epoch {epoch}: {:?}",
                                o.comps
                            )));
                        }
                        tape.backward(total)?;
                        let mut grads: Vec<Tensor> = bound.leaves.iter().map(|l| l.grad()).collect();
                        drop(bound);
                        opt.step(&mut model.tensors, &mut grads);
                        Some(o)
                    }
                    None => None,
                };
                out
            };
            if let Some(o) = outcome {
                epoch_comps.task += o.comps.task;
                epoch_comps.fit += o.comps.fit;
                epoch_comps.seam += o.comps.seam;
                epoch_comps.delta_anchor += o.comps.delta_anchor;
                epoch_comps.a_scale += o.comps.a_scale;
                epoch_comps.hyp += o.comps.hyp;
                epoch_comps.beta += o.comps.beta;
                epoch_comps.drift += o.comps.drift;
                epoch_comps.total += o.comps.total;
                epoch_correct += o.correct;
                epoch_counted += o.counted;
                epoch_metric_sum += o.metric_sum;
                for (s, v) in delta_sums.iter_mut().zip(o.delta_sums.iter()) {
                    *s += v;
                }
                delta_count += o.delta_count;
                n_batches += 1;
            }
        }
        if n_batches == 0 {
            return Err(Error::data("every batch degenerate (all-masked); nothing to train on"));
        }
        let nb = n_batches as f64;
        let comps = LossComponents {
            task: epoch_comps.task / nb,
            fit: epoch_comps.fit / nb,
            seam: epoch_comps.seam / nb,
            delta_anchor: epoch_comps.delta_anchor / nb,
            a_scale: epoch_comps.a_scale / nb,
            hyp: epoch_comps.hyp / nb,
            beta: epoch_comps.beta / nb,
            drift: epoch_comps.drift / nb,
            total: epoch_comps.total / nb,
        };
        let task_metric = match model.config.head {
            TaskHead::Classify { .. } => epoch_correct as f64 / epoch_counted.max(1) as f64,
            _ => epoch_metric_sum / epoch_counted.max(1) as f64,
        };
        let deltas = if delta_count > 0 {
            delta_sums.iter().map(|s| s / delta_count as f64).collect()
        } else {
            vec![f64::NAN; model.config.n_scales]
        };
        log.epochs.push(EpochLog {
            epoch,
            split: "train".into(),
            task_metric,
            comps,
            deltas: deltas.clone(),
            mean_log_abs_a: mean_log_abs_a(model),
        });

        if let Some(vd) = val {
            let vm = evaluate(model, vd, cfg)?;
            log.epochs.push(EpochLog {
                epoch,
                split: "val".into(),
                task_metric: vm,
                comps: LossComponents::default(),
                deltas,
                mean_log_abs_a: mean_log_abs_a(model),
            });
            let improved = match best_val {
                None => true,
                Some(b) => {
                    if higher_better {
                        vm > b
                    } else {
                        vm < b
                    }
                }
            };
            if improved {
                best_val = Some(vm);
                since_best = 0;
                if cfg.restore_best {
                    best_tensors = Some(model.tensors.clone());
                }
            } else {
                since_best += 1;
                if let Some(patience) = cfg.early_stop_patience {
                    if since_best >= patience {
                        break;
                    }
                }
            }
        }
    }
    if let Some(best) = best_tensors {
        model.tensors = best;
    }
    Ok(log)
}

#[allow(clippy::type_complexity)]
fn run_batch<'t>(
    tape: &'t Tape,
    bound: &BoundModel<'_, 't>,
    data: &PreparedData,
    chunk: &[usize],
    cfg: &TrainConfig,
    mask_rng: &mut ChaCha8Rng,
) -> Result<Option<(Tv<'t>, BatchOutcome)>> {
    let model = bound.model;
    let w = &cfg.weights;
    let step = model.config.acquisition_step;
    let mut task_terms: Vec<Tv<'t>> = Vec::with_capacity(chunk.len());
    let mut fit_terms: Vec<Tv<'t>> = Vec::new();
    let mut seam_terms: Vec<Tv<'t>> = Vec::new();
    let mut hyp_terms: Vec<Tv<'t>> = Vec::new();
    let mut beta_terms: Vec<Tv<'t>> = Vec::new();
    let mut anchor_terms: Vec<Tv<'t>> = Vec::new();
    let mut pooled_full: Vec<Tv<'t>> = Vec::new();
    let mut pooled_trunc: Vec<Tv<'t>> = Vec::new();
    let mut correct = 0usize;
    let mut counted = 0usize;
    let mut metric_sum = 0.0;
    let mut delta_sums = vec![0.0; model.config.n_scales];
    let mut delta_count = 0usize;

    for &idx in chunk {
        let x = &data.inputs[idx];
        let spectra = data.spectra[idx].as_deref();
        let target = &data.targets[idx];

        let x_in;
        let mask;
        match target {
            Target::Reconstruct => {
                let m = gen_mask(x.rows(), x.cols(), &cfg.mask, mask_rng);
                let frac = masked_fraction(&m);
                if frac == 0.0 || frac == 1.0 {
                    // degenerate mask; skip this sequence
                    continue;
                }
                x_in = apply_mask(x, &m);
                mask = Some(m);
            }
            _ => {
                x_in = x.clone();
                mask = None;
            }
        }

        let pass = bound.forward(&x_in, spectra)?;
        for (s, d) in delta_sums.iter_mut().zip(pass.deltas.iter()) {
            *s += d.value();
        }
        delta_count += 1;

        let task = match target {
            Target::Class(label) => {
                let t = task_loss_classification_on(tape, pass.prediction, *label, w.label_smoothing, data.n_classes)?;
                let pred = argmax(&pass.prediction.clone_tensor().data);
                if pred == *label {
                    correct += 1;
                }
                counted += 1;
                t
            }
            Target::Forecast { target, mu, sigma } => {
                let horizon = target.rows();
                let d = target.cols();
                let denorm = pass
                    .prediction
                    .reshape(vec![horizon, d])
                    .mul_row(tape.constant(Tensor::vector(sigma.clone())))
                    .add_row(tape.constant(Tensor::vector(mu.clone())));
                let t = mse_on(denorm, target, tape);
                metric_sum += t.value();
                counted += 1;
                t
            }
            Target::Reconstruct => {
                let m = mask.as_ref().unwrap();
                let n_masked = m.iter().filter(|&&b| b).count();
                let mask_t = tape.constant(Tensor::new(
                    x.shape.clone(),
                    m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                ));
                let diff = (pass.prediction - tape.constant(x.clone())) * mask_t;
                let t = diff.abs().sum().mul_scalar(tape.scalar(1.0 / n_masked as f64));
                metric_sum += t.value();
                counted += 1;
                t
            }
        };
        task_terms.push(task);

        if let Some(fit) = &pass.fit {
            if w.w_fit != 0.0 {
                if let Some(sps) = spectra {
                    let mut acc = fit_loss(fit, &sps[0]);
                    for sp in &sps[1..] {
                        acc = acc + fit_loss(fit, sp);
                    }
                    fit_terms.push(acc.mul_scalar(tape.scalar(1.0 / sps.len() as f64)));
                }
            }
            if w.w_seam != 0.0 {
                seam_terms.push(seam_loss(fit));
            }
            if w.lambda_beta != 0.0 {
                beta_terms.push(extreme_beta_loss(&fit.betas, 0.2));
            }
            if w.w_hyp != 0.0 {
                if let Some(teacher) = &data.teachers[idx] {
                    hyp_terms.push(hyp_alignment_loss(fit, teacher)?);
                }
            }
            if w.lambda_delta != 0.0 {
                anchor_terms.push(delta_anchor_loss(&pass.deltas, step, w.lambda_delta)?);
            }
        }

        if w.lambda_drift > 0.0 {
            let x_trunc = prefix(&x_in, cfg.drift_prefix_fraction);
            let pass_trunc = bound.forward(&x_trunc, spectra)?;
            pooled_full.push(pass.pooled);
            pooled_trunc.push(pass_trunc.pooled);
        }
    }

    if task_terms.is_empty() {
        return Ok(None);
    }
    let mean_of = |terms: &[Tv<'t>]| -> Option<Tv<'t>> {
        if terms.is_empty() {
            return None;
        }
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = acc + *t;
        }
        Some(acc.mul_scalar(tape.scalar(1.0 / terms.len() as f64)))
    };
    let task = mean_of(&task_terms).unwrap();
    let drift = if w.lambda_drift > 0.0 && pooled_full.len() >= 2 {
        let zf = tape.stack_rows(&pooled_full);
        let zt = tape.stack_rows(&pooled_trunc);
        Some(drift_intervention_loss_on(tape, zf, zt, w.lambda_drift)?)
    } else {
        None
    };
    let terms = LossTerms {
        task,
        fit: mean_of(&fit_terms),
        seam: mean_of(&seam_terms),
        delta_anchor: mean_of(&anchor_terms),
        a_scale: if w.lambda_a != 0.0 { Some(bound.a_scale_loss_on(w.lambda_a)) } else { None },
        hyp: mean_of(&hyp_terms),
        beta: mean_of(&beta_terms),
        drift,
    };
    let (total, comps) = compose_total(tape, &terms, w);
    Ok(Some((total, BatchOutcome { comps, correct, counted, metric_sum, delta_sums, delta_count })))
}

/// Task metric on a prepared dataset: accuracy for classification,
/// mean squared error for forecasting, masked L1 for reconstruction
/// (deterministic per-item masks).
pub fn evaluate(model: &Model, data: &PreparedData, cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("empty evaluation set"));
    }
    let tape = Tape::new();
    let bound = BoundModel::new(&tape, model, false);
    let mut correct = 0usize;
    let mut acc = 0.0;
    let mut counted = 0usize;
    for idx in 0..data.len() {
        let x = &data.inputs[idx];
        let spectra = data.spectra[idx].as_deref();
        match &data.targets[idx] {
            Target::Class(label) => {
                let pass = bound.forward(x, spectra)?;
                if argmax(&pass.prediction.clone_tensor().data) == *label {
                    correct += 1;
                }
                counted += 1;
            }
            Target::Forecast { target, mu, sigma } => {
                let pass = bound.forward(x, spectra)?;
                let horizon = target.rows();
                let d = target.cols();
                let pred = pass.prediction.clone_tensor();
                let mut se = 0.0;
                for i in 0..horizon {
                    for j in 0..d {
                        let v = pred.data[i * d + j] * sigma[j] + mu[j];
                        let e = v - target.at2(i, j);
                        se += e * e;
                    }
                }
                acc += se / (horizon * d) as f64;
                counted += 1;
            }
            Target::Reconstruct => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x77aa ^ idx as u64);
                let m = gen_mask(x.rows(), x.cols(), &cfg.mask, &mut rng);
                let frac = masked_fraction(&m);
                if frac == 0.0 || frac == 1.0 {
                    continue;
                }
                let pass = bound.forward(&apply_mask(x, &m), spectra)?;
                let pred = pass.prediction.clone_tensor();
                let mut l1 = 0.0;
                let mut n = 0usize;
                for (i, (&masked, (&p, &t))) in m.iter().zip(pred.data.iter().zip(x.data.iter())).enumerate() {
                    let _ = i;
                    if masked {
                        l1 += (p - t).abs();
                        n += 1;
                    }
                }
                acc += l1 / n as f64;
                counted += 1;
            }
        }
    }
    if counted == 0 {
        return Err(Error::data("nothing evaluable in the dataset"));
    }
    Ok(match model.config.head {
        TaskHead::Classify { .. } => correct as f64 / counted as f64,
        _ => acc / counted as f64,
    })
}

/// Pooled embeddings of every item, yielding an (n, d_model) batch.
pub fn embed_all(model: &Model, data: &PreparedData) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = BoundModel::new(&tape, model, false);
    let d = model.config.d_model;
    let mut rows = Vec::with_capacity(data.len() * d);
    for idx in 0..data.len() {
        let pass = bound.forward(&data.inputs[idx], data.spectra[idx].as_deref())?;
        rows.extend_from_slice(&pass.pooled.clone_tensor().data);
    }
    Ok(Tensor::matrix(data.len(), d, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msssm::{BackboneConfig, DeltaMode};
    use crate::signalgen::{gen_two_timescale_task, TwoTimescaleParams};

    fn tiny_model(mode: DeltaMode) -> Model {
        let mut cfg = BackboneConfig::desk(2, TaskHead::Classify { n_classes: 2 });
        cfg.d_model = 12;
        cfg.d_inter = 16;
        cfg.state_dim = 4;
        cfg.head_dim = 6;
        cfg.n_blocks = 1;
        cfg.delta_mode = mode;
        Model::init(cfg, 3).unwrap()
    }

    fn tiny_data(model: &Model, n_per_class: usize, seed: u64) -> PreparedData {
        let set = gen_two_timescale_task(n_per_class, 48, 2, &TwoTimescaleParams::default(), seed).unwrap();
        prepare_classification(&set, model, InputWindow::Full).unwrap()
    }

    #[test]
    fn loss_decreases_on_toy_task() {
        // seed-averaged over a few runs: mean loss over the last 5 of 20
        // steps is below the first step's loss
        let mut improved = 0;
        for seed in 0..3u64 {
            let mut model = tiny_model(DeltaMode::Random);
            let data = tiny_data(&model, 8, seed);
            let cfg = TrainConfig {
                epochs: 5,
                batch_size: 4,
                lr: 3e-3,
                weights: LossWeights::task_only(),
                seed,
                ..TrainConfig::default()
            };
            let log = train_loop(&mut model, &data, None, &cfg).unwrap();
            let first = log.epochs.first().unwrap().comps.total;
            let last = log.epochs.last().unwrap().comps.total;
            if last < first {
                improved += 1;
            }
        }
        assert!(improved >= 2, "loss failed to decrease on {improved}/3 seeds");
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let run = || {
            let mut model = tiny_model(DeltaMode::Spectrum);
            let data = tiny_data(&model, 6, 4);
            let cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 9, ..TrainConfig::default() };
            train_loop(&mut model, &data, Some(&data), &cfg).unwrap().to_csv()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn component_sum_identity_every_epoch() {
        let mut model = tiny_model(DeltaMode::Spectrum);
        let data = tiny_data(&model, 6, 5);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, seed: 1, ..TrainConfig::default() };
        let log = train_loop(&mut model, &data, None, &cfg).unwrap();
        for e in &log.epochs {
            assert!(
                (e.comps.total - e.comps.sum_of_parts()).abs() < 1e-9,
                "identity broken at epoch {}: {:?}",
                e.epoch,
                e.comps
            );
        }
    }

    #[test]
    fn task_only_weights_yield_pure_task_log() {
        let run = |w: LossWeights| {
            let mut model = tiny_model(DeltaMode::Spectrum);
            let data = tiny_data(&model, 6, 2);
            let cfg = TrainConfig { epochs: 2, batch_size: 4, weights: w, seed: 3, ..TrainConfig::default() };
            train_loop(&mut model, &data, None, &cfg).unwrap().to_csv()
        };
        let explicit_zero = LossWeights {
            w_fit: 0.0,
            w_seam: 0.0,
            lambda_delta: 0.0,
            lambda_a: 0.0,
            w_hyp: 0.0,
            lambda_beta: 0.0,
            label_smoothing: 0.1,
            lambda_drift: 0.0,
        };
        let a = run(explicit_zero);
        let b = run(LossWeights::task_only());
        assert_eq!(a, b, "aux-zero run must be bit-identical to the task-only run");
        for line in a.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let total: f64 = cols[3].parse().unwrap();
            let task: f64 = cols[4].parse().unwrap();
            assert_eq!(total, task);
        }
    }

    #[test]
    fn hypernet_receives_gradient_through_steps_alone() {
        // only the task loss is active; the only path into the
        // hypernet weights is through the step values
        let model = tiny_model(DeltaMode::Spectrum);
        let data = tiny_data(&model, 2, 8);
        let tape = Tape::new();
        let bound = BoundModel::new(&tape, &model, true);
        let cfg = TrainConfig { weights: LossWeights::task_only(), ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (total, _) = run_batch(&tape, &bound, &data, &[0, 1, 2, 3], &cfg, &mut rng).unwrap().unwrap();
        tape.backward(total).unwrap();
        let idx = model.layout.hypernet.unwrap();
        let g = bound.leaves[idx[0]].grad();
        let norm: f64 = g.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "no gradient reached the hypernet (norm {norm})");
    }

    #[test]
    fn nan_loss_aborts_with_component_dump() {
        let mut model = tiny_model(DeltaMode::Random);
        // poison a weight so the forward pass explodes
        let widx = model.layout.head_w;
        model.tensors[widx].data[0] = f64::NAN;
        let data = tiny_data(&model, 4, 6);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, seed: 0, ..TrainConfig::default() };
        let err = train_loop(&mut model, &data, None, &cfg).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("non-finite"), "unexpected error: {msg}");
    }

    #[test]
    fn pretrain_masked_positions_only() {
        // perturbing the prediction at unmasked positions leaves the
        // masked-L1 value unchanged: checked via the loss construction
        let mut model = tiny_model(DeltaMode::Random);
        model.config.head = TaskHead::Reconstruct;
        let model = {
            let mut cfg = model.config.clone();
            cfg.head = TaskHead::Reconstruct;
            Model::init(cfg, 3).unwrap()
        };
        let set = gen_two_timescale_task(4, 40, 2, &TwoTimescaleParams::default(), 0).unwrap();
        let data = prepare_pretrain(&set, &model).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, seed: 0, ..TrainConfig::default() };
        let mut m = model.clone();
        let log = train_loop(&mut m, &data, None, &cfg).unwrap();
        assert!(log.epochs[0].comps.task.is_finite());
        // evaluation path
        let v = evaluate(&m, &data, &cfg).unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
}
