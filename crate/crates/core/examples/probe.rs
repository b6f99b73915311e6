use pimsm_core::analysis::{drift_metrics, sequence_spectra};
use pimsm_core::engine::Tensor;
use pimsm_core::msssm::{backbone_forward, BackboneConfig, DeltaMode, Model, TaskHead};
use pimsm_core::signalgen::{gen_two_timescale_task, TwoTimescaleParams};
use pimsm_core::train::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let p = TwoTimescaleParams::default();
    let t_len = 64;
    let frac = 1.0 / 4.0;
    let train_set = gen_two_timescale_task(64, t_len, 2, &p, 100).unwrap();
    let val_set = gen_two_timescale_task(16, t_len, 2, &p, 200).unwrap();
    let test_set = gen_two_timescale_task(48, t_len, 2, &p, 300).unwrap();

    let mut summary: Vec<(String, f64, f64, f64)> = Vec::new();
    for mode in [DeltaMode::Spectrum, DeltaMode::SingleScale, DeltaMode::Random] {
        let mut accs_t = Vec::new();
        let mut ckas = Vec::new();
        for seed in [0u64, 1, 2] {
            let mut models = Vec::new();
            let mut acc_pair = Vec::new();
            for (vi, window) in [(0u64, InputWindow::Full), (1, InputWindow::PrefixFraction(frac))] {
                let mut cfg = BackboneConfig { delta_mode: mode, ..BackboneConfig::desk(2, TaskHead::Classify { n_classes: 2 }) };
                cfg.scale_opts.delta_max_steps = 2.0;
                // paired init: same model seed for both views
                let mut model = Model::init(cfg, 17 * seed + 3).unwrap();
                // random preset draws its steps per run (view-dependent)
                if mode == DeltaMode::Random {
                    let mut rng = ChaCha8Rng::seed_from_u64(999 + seed * 2 + vi);
                    let (dmin, dmax) = model.config.scale_opts.delta_bounds(1.0);
                    let mut ds: Vec<f64> = (0..3).map(|_| (rng.gen::<f64>() * (dmax.ln() - dmin.ln()) + dmin.ln()).exp()).collect();
                    ds.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    model.fixed_deltas = Some(ds);
                }
                let data = prepare_classification(&train_set, &model, window).unwrap();
                let vdata = prepare_classification(&val_set, &model, window).unwrap();
                let weights = if mode == DeltaMode::Spectrum { LossWeights::default() } else { LossWeights::task_only() };
                let tcfg = TrainConfig { epochs: 40, batch_size: 8, lr: 2e-3, weights, seed: 31 * seed, ..TrainConfig::default() };
                train_loop(&mut model, &data, Some(&vdata), &tcfg).unwrap();
                let tdata = prepare_classification(&test_set, &model, window).unwrap();
                acc_pair.push(evaluate(&model, &tdata, &tcfg).unwrap());
                models.push(model);
            }
            let d_model = models[0].config.d_model;
            let mut zf = Vec::new();
            let mut zt = Vec::new();
            for x in &test_set.sequences {
                let sp = sequence_spectra(&models[0], x).unwrap();
                let (la, _) = backbone_forward(&models[0], x, sp.as_deref()).unwrap();
                zf.extend_from_slice(&la.pooled);
                let xt = prefix(x, frac);
                let sp2 = sequence_spectra(&models[1], x).unwrap();
                let (lb, _) = backbone_forward(&models[1], &xt, sp2.as_deref()).unwrap();
                zt.extend_from_slice(&lb.pooled);
            }
            let (cka, _, _) = drift_metrics(
                &Tensor::matrix(test_set.len(), d_model, zf),
                &Tensor::matrix(test_set.len(), d_model, zt),
            )
            .unwrap();
            println!("{:?} seed {seed}: full {:.3} trunc {:.3} cka {:.3}  deltas full {:?} trunc {:?}", mode, acc_pair[0], acc_pair[1], cka,
                models[0].fixed_deltas, models[1].fixed_deltas);
            accs_t.push(acc_pair[1]);
            ckas.push(cka);
        }
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        summary.push((format!("{mode:?}"), m(&accs_t), m(&ckas), 0.0));
    }
    println!("== summary (trunc acc, cka): {:?}", summary);
}
