//! Backbone configuration, parameter storage, initialization, and
//! checkpointing.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Tape, Tensor, Tv};
use crate::error::{Error, Result};
use crate::scalemap::ScaleMapOptions;
use crate::spectral::HyperNetParams;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// How the per-scale discretization steps are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaMode {
    /// Steps derived per sequence from its fitted spectrum.
    Spectrum,
    /// K free log-step parameters, trained with everything else.
    Learnable,
    /// Fixed steps drawn log-uniform over the bounds at init.
    Random,
    /// One shared learnable step: the single-scale baseline.
    SingleScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TaskHead {
    Classify { n_classes: usize },
    /// Predicts `horizon` future steps for every input channel.
    Forecast { horizon: usize },
    /// Per-timestep linear decoder for masked pretraining.
    Reconstruct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_dim: usize,
    pub d_model: usize,
    pub d_inter: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_scales: usize,
    pub state_dim: usize,
    pub head_dim: usize,
    pub head: TaskHead,
    pub delta_mode: DeltaMode,
    pub acquisition_step: f64,
    /// Analysis band for the spectral pipeline; `None` uses the first
    /// non-DC bin through Nyquist.
    pub f_min: Option<f64>,
    pub f_max: Option<f64>,
    pub scale_opts: ScaleMapOptions,
    pub hypernet_features: usize,
    pub hypernet_hidden: usize,
}

impl BackboneConfig {
    /// Desk-scale default: small enough to train in seconds per epoch.
    pub fn desk(in_dim: usize, head: TaskHead) -> Self {
        BackboneConfig {
            in_dim,
            d_model: 32,
            d_inter: 64,
            n_blocks: 2,
            n_heads: 6,
            n_scales: 3,
            state_dim: 8,
            head_dim: 16,
            head,
            delta_mode: DeltaMode::Spectrum,
            acquisition_step: 1.0,
            f_min: None,
            f_max: None,
            scale_opts: ScaleMapOptions::default(),
            hypernet_features: 32,
            hypernet_hidden: 64,
        }
    }

    /// Paper-scale preset; constructible but far beyond desk budgets.
    pub fn paper_scale(in_dim: usize, head: TaskHead) -> Self {
        BackboneConfig {
            d_model: 320,
            d_inter: 1024,
            n_blocks: 9,
            state_dim: 64,
            head_dim: 64,
            ..BackboneConfig::desk(in_dim, head)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_scales == 0 || self.n_heads % self.n_scales != 0 {
            return Err(Error::param(format!(
                "head count {} must be a positive multiple of scale count {}",
                self.n_heads, self.n_scales
            )));
        }
        if self.d_model == 0 || self.state_dim == 0 || self.head_dim == 0 || self.n_blocks == 0 || self.in_dim == 0 {
            return Err(Error::param("all dimensions must be positive"));
        }
        self.scale_opts.validate()?;
        if !(self.acquisition_step > 0.0) {
            return Err(Error::param("acquisition step must be positive"));
        }
        Ok(())
    }

    pub fn heads_per_scale(&self) -> usize {
        self.n_heads / self.n_scales
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            TaskHead::Classify { n_classes } => n_classes,
            TaskHead::Forecast { horizon } => horizon * self.in_dim,
            TaskHead::Reconstruct => self.in_dim,
        }
    }
}

/// Per-block tensor indices into the flat parameter list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockLayout {
    pub w_u: usize,
    pub w_b: usize,
    pub w_c: usize,
    pub a_log: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub w_fuse: usize,
    pub norm_ssm: usize,
    pub norm_mlp: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_gate: usize,
    pub b_gate: usize,
    pub w_out: usize,
    pub b_out: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layout {
    pub embed_w: usize,
    pub embed_b: usize,
    pub blocks: Vec<BlockLayout>,
    pub norm_final: usize,
    pub head_w: usize,
    pub head_b: usize,
    /// Indices of the six hypernet tensors, in
    /// [`HyperNetParams::tensors`] order (spectrum mode only).
    pub hypernet: Option<[usize; 6]>,
    /// Log-step parameter tensor (learnable / single-scale modes).
    pub log_delta: Option<usize>,
}

/// The full trainable model: a flat named tensor list plus the layout
/// that addresses it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: BackboneConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub layout: Layout,
    /// head index -> scale group index (0 = fastest).
    pub grouping: Vec<usize>,
    /// Mean |A| over all heads at initialization.
    pub a0: f64,
    /// Steps frozen at init for the random-step ablation.
    pub fixed_deltas: Option<Vec<f64>>,
}

/// One head's initialization draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadInit {
    pub a_log: f64,
    pub scale_index: usize,
}

/// Draws per-head decay parameters: `tau` log-uniform over
/// `[1, 100] * acquisition_step`, `A = -1/tau`, `a_log = ln(1/tau)`.
/// Returns the draws plus the recorded initial mean of `|A|`.
pub fn init_heads(n_heads: usize, n_scales: usize, acquisition_step: f64, seed: u64) -> Result<(Vec<HeadInit>, f64)> {
    if n_heads == 0 || n_scales == 0 || n_heads % n_scales != 0 {
        return Err(Error::param("head count must be a positive multiple of scale count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = n_heads / n_scales;
    let lo = (1.0 * acquisition_step).ln();
    let hi = (100.0 * acquisition_step).ln();
    let mut heads = Vec::with_capacity(n_heads);
    let mut sum_abs_a = 0.0;
    for j in 0..n_heads {
        let tau = (lo + rng.gen::<f64>() * (hi - lo)).exp();
        let a_log = (1.0 / tau).ln();
        sum_abs_a += a_log.exp();
        heads.push(HeadInit { a_log, scale_index: j / per });
    }
    Ok((heads, sum_abs_a / n_heads as f64))
}

impl Model {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names: Vec<String> = Vec::new();
        let mut tensors: Vec<Tensor> = Vec::new();
        let add = |names: &mut Vec<String>, tensors: &mut Vec<Tensor>, name: String, t: Tensor| -> usize {
            names.push(name);
            tensors.push(t);
            tensors.len() - 1
        };
        let xavier = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect())
        };

        let d = config.d_model;
        let embed_w = add(&mut names, &mut tensors, "embed.w".into(), xavier(&mut rng, config.in_dim, d));
        let embed_b = add(&mut names, &mut tensors, "embed.b".into(), Tensor::zeros(&[d]));

        let mut grouping = Vec::new();
        let mut a0_sum = 0.0;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for bi in 0..config.n_blocks {
            let (heads, a0_block) =
                init_heads(config.n_heads, config.n_scales, config.acquisition_step, seed ^ (0x9e37 + bi as u64))?;
            a0_sum += a0_block;
            if bi == 0 {
                grouping = heads.iter().map(|h| h.scale_index).collect();
            }
            let a_log_t = Tensor::vector(heads.iter().map(|h| h.a_log).collect());
            let p = format!("block{bi}");
            let kdh = config.n_scales * config.head_dim;
            let block = BlockLayout {
                w_u: add(&mut names, &mut tensors, format!("{p}.w_u"), xavier(&mut rng, d, config.head_dim)),
                w_b: add(&mut names, &mut tensors, format!("{p}.w_b"), xavier(&mut rng, d, config.state_dim)),
                w_c: add(&mut names, &mut tensors, format!("{p}.w_c"), xavier(&mut rng, d, config.state_dim)),
                a_log: add(&mut names, &mut tensors, format!("{p}.a_log"), a_log_t),
                wq: add(&mut names, &mut tensors, format!("{p}.attn.wq"), xavier(&mut rng, config.head_dim, config.head_dim)),
                wk: add(&mut names, &mut tensors, format!("{p}.attn.wk"), xavier(&mut rng, config.head_dim, config.head_dim)),
                wv: add(&mut names, &mut tensors, format!("{p}.attn.wv"), xavier(&mut rng, config.head_dim, config.head_dim)),
                w_fuse: add(&mut names, &mut tensors, format!("{p}.attn.w_fuse"), xavier(&mut rng, kdh, d)),
                norm_ssm: add(&mut names, &mut tensors, format!("{p}.norm_ssm"), Tensor::vector(vec![1.0; d])),
                norm_mlp: add(&mut names, &mut tensors, format!("{p}.norm_mlp"), Tensor::vector(vec![1.0; d])),
                w_in: add(&mut names, &mut tensors, format!("{p}.mlp.w_in"), xavier(&mut rng, d, config.d_inter)),
                b_in: add(&mut names, &mut tensors, format!("{p}.mlp.b_in"), Tensor::zeros(&[config.d_inter])),
                w_gate: add(&mut names, &mut tensors, format!("{p}.mlp.w_gate"), xavier(&mut rng, d, config.d_inter)),
                b_gate: add(&mut names, &mut tensors, format!("{p}.mlp.b_gate"), Tensor::zeros(&[config.d_inter])),
                w_out: add(&mut names, &mut tensors, format!("{p}.mlp.w_out"), xavier(&mut rng, config.d_inter, d)),
                b_out: add(&mut names, &mut tensors, format!("{p}.mlp.b_out"), Tensor::zeros(&[d])),
            };
            blocks.push(block);
        }
        let norm_final = add(&mut names, &mut tensors, "norm_final".into(), Tensor::vector(vec![1.0; d]));
        let head_w = add(&mut names, &mut tensors, "head.w".into(), xavier(&mut rng, d, config.out_dim()));
        let head_b = add(&mut names, &mut tensors, "head.b".into(), Tensor::zeros(&[config.out_dim()]));

        let hypernet = if config.delta_mode == DeltaMode::Spectrum {
            let hp = HyperNetParams::init(config.n_scales, config.hypernet_features, config.hypernet_hidden, seed ^ 0x5bd1);
            let mut idx = [0usize; 6];
            for (i, (name, t)) in HyperNetParams::tensor_names().iter().zip(hp.tensors().iter()).enumerate() {
                idx[i] = add(&mut names, &mut tensors, name.to_string(), (*t).clone());
            }
            Some(idx)
        } else {
            None
        };

        let (dmin, dmax) = config.scale_opts.delta_bounds(config.acquisition_step);
        let log_delta = match config.delta_mode {
            DeltaMode::Learnable => {
                // log-spaced init spanning the middle of the step range
                let k = config.n_scales;
                let vals: Vec<f64> = (0..k)
                    .map(|i| {
                        let u = (i as f64 + 0.5) / k as f64;
                        dmax.ln() + (dmin.ln() - dmax.ln()) * u
                    })
                    .collect();
                Some(add(&mut names, &mut tensors, "log_delta".into(), Tensor::vector(vals)))
            }
            DeltaMode::SingleScale => Some(add(
                &mut names,
                &mut tensors,
                "log_delta".into(),
                Tensor::vector(vec![config.acquisition_step.ln()]),
            )),
            _ => None,
        };

        let fixed_deltas = if config.delta_mode == DeltaMode::Random {
            let mut ds: Vec<f64> = (0..config.n_scales)
                .map(|_| (rng.gen::<f64>() * (dmax.ln() - dmin.ln()) + dmin.ln()).exp())
                .collect();
            ds.sort_by(|a, b| b.partial_cmp(a).unwrap());
            Some(ds)
        } else {
            None
        };

        Ok(Model {
            a0: a0_sum / config.n_blocks as f64,
            layout: Layout { embed_w, embed_b, blocks, norm_final, head_w, head_b, hypernet, log_delta },
            config,
            names,
            tensors,
            grouping,
            fixed_deltas,
        })
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Binds every tensor as a trainable leaf (or constant) in
    /// registration order.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Tv<'t>> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Hypernet view over the flat tensor list.
    pub fn hypernet_params(&self) -> Option<HyperNetParams> {
        self.layout.hypernet.map(|idx| HyperNetParams {
            k: self.config.n_scales,
            n_features: self.config.hypernet_features,
            hidden: self.config.hypernet_hidden,
            w1: self.tensors[idx[0]].clone(),
            b1: self.tensors[idx[1]].clone(),
            w2: self.tensors[idx[2]].clone(),
            b2: self.tensors[idx[3]].clone(),
            w_out: self.tensors[idx[4]].clone(),
            b_out: self.tensors[idx[5]].clone(),
        })
    }

    pub fn to_checkpoint_json(&self) -> String {
        let cp = Checkpoint { schema_version: CHECKPOINT_SCHEMA_VERSION, model: self.clone() };
        serde_json::to_string(&cp).expect("checkpoint serialization")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(s).map_err(|e| Error::data(format!("bad checkpoint: {e}")))?;
        if cp.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::data(format!(
                "checkpoint schema {} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})",
                cp.schema_version
            )));
        }
        cp.model.config.validate()?;
        Ok(cp.model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    model: Model,
}
