//! The full tagger: toy encoder, multi-head transport alignment, gated
//! fusion and the variational head, wired over a named parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::fusion::{
    cross_attention_on, fuse_on, gate_values_on, interpolate_on, ot_aggregate_on, AggregationMode, FusionParams,
    FusionVars,
};
use crate::ot::{
    average_heads_on, build_cost_on, row_entropy_on, sinkhorn_on, uniform, HeadProjection, HeadVars, OtError,
    PositionGrid, SinkhornConfig, SinkhornStats,
};
use crate::seeds::{mix, stream};
use crate::synthdoc::{encode_on, DocInputs, EncoderDims, EncoderParams, EncoderVars, SynthError, POS_DIM};
use crate::vib::{
    cross_entropy_sum_on, encode_gaussian_on, kl_sum_on, logits_on, reparameterize_on, VibParams, VibVars,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter `{name}`: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture, solver settings and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub embed_dim: usize,
    pub ot_heads: usize,
    pub attention_heads: usize,
    pub d_z: usize,
    pub vocab: usize,
    pub patch_dim: usize,
    pub classes: usize,
    pub max_len: usize,
    pub sinkhorn: SinkhornConfig,
    pub lambda_init: f64,
    pub aggregation: AggregationMode,
    pub disable_ot: bool,
    pub disable_gate: bool,
    pub disable_vib: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            embed_dim: 32,
            ot_heads: 4,
            attention_heads: 4,
            d_z: 32,
            vocab: 64,
            patch_dim: 32,
            classes: 7,
            max_len: 32,
            sinkhorn: SinkhornConfig::default(),
            lambda_init: 0.1,
            aggregation: AggregationMode::Modulated,
            disable_ot: false,
            disable_gate: false,
            disable_vib: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.ot_heads == 0 || self.d % self.ot_heads != 0 {
            return bad(format!("{} transport heads do not divide d = {}", self.ot_heads, self.d));
        }
        if self.attention_heads == 0 || self.d % self.attention_heads != 0 {
            return bad(format!(
                "{} attention heads do not divide d = {}",
                self.attention_heads, self.d
            ));
        }
        if self.d_z == 0 || self.classes < 2 || self.vocab == 0 || self.max_len == 0 {
            return bad("d_z, vocab and max_len must be positive and classes >= 2".into());
        }
        if !(self.sinkhorn.tau > 0.0) || self.sinkhorn.max_iters == 0 {
            return bad(format!(
                "sinkhorn needs tau > 0 and max_iters >= 1, got tau {} max_iters {}",
                self.sinkhorn.tau, self.sinkhorn.max_iters
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.ot_heads
    }

    fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            vocab: self.vocab,
            embed: self.embed_dim,
            patch_dim: self.patch_dim,
            d: self.d,
        }
    }

    /// Names and shapes of every parameter, in store order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let e = self.encoder_dims();
        let (d, dh, dz, c) = (self.d, self.head_dim(), self.d_z, self.classes);
        let mut specs = vec![
            ("encoder.tok_emb".to_string(), vec![e.vocab, e.embed]),
            ("encoder.tok_proj".to_string(), vec![e.token_in(), d]),
            ("encoder.tok_bias".to_string(), vec![1, d]),
            ("encoder.patch_proj".to_string(), vec![e.patch_in(), d]),
            ("encoder.patch_bias".to_string(), vec![1, d]),
        ];
        for h in 0..self.ot_heads {
            specs.push((format!("ot.head{h}.w_t"), vec![d, dh]));
            specs.push((format!("ot.head{h}.w_v"), vec![d, dh]));
            specs.push((format!("ot.head{h}.lambda"), vec![1, 1]));
        }
        for n in ["w_q", "w_k", "w_v", "w_o"] {
            specs.push((format!("attention.{n}"), vec![d, d]));
        }
        specs.push(("gate.w".to_string(), vec![2 * d + 1, 1]));
        specs.push(("gate.b".to_string(), vec![1, 1]));
        specs.push(("vib.w_mu".to_string(), vec![d, dz]));
        specs.push(("vib.b_mu".to_string(), vec![1, dz]));
        specs.push(("vib.w_sigma".to_string(), vec![d, dz]));
        specs.push(("vib.b_sigma".to_string(), vec![1, dz]));
        specs.push(("vib.w_c".to_string(), vec![dz, c]));
        specs.push(("vib.b_c".to_string(), vec![1, c]));
        specs
    }
}

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Shrinks the initial mean map so every latent dimension starts close to
/// the prior and only those the classifier needs grow away from it.
pub const LATENT_INIT_SCALE: f64 = 0.1;

/// Parameters plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect())
}

impl Model {
    /// Xavier-uniform weights, zero biases, zero gate (so `g = 0.5` at the
    /// start), zero log-variance map, and `λ_h = lambda_init`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        let mut names = Vec::with_capacity(specs.len());
        let mut values = Vec::with_capacity(specs.len());
        for (i, (name, shape)) in specs.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, stream::INIT, i as u64]));
            let (r, c) = (shape[0], shape[1]);
            let value = if name.ends_with(".lambda") {
                Tensor::scalar(config.lambda_init)
            } else if name.contains("bias")
                || name.starts_with("gate.")
                || name.starts_with("vib.b_")
                || name == "vib.w_sigma"
            {
                Tensor::zeros(&shape)
            } else if name == "vib.w_mu" {
                let mut t = xavier(&mut rng, r, c);
                t.data_mut().iter_mut().for_each(|x| *x *= LATENT_INIT_SCALE);
                t
            } else {
                xavier(&mut rng, r, c)
            };
            names.push(name);
            values.push(value);
        }
        Ok(Self {
            config,
            params: ParamStore { names, values },
        })
    }

    /// Rebuilds from stored tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut map: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, shape) in config.param_specs() {
            let t = map.remove(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: shape,
                    got: t.shape().to_vec(),
                });
            }
            names.push(name);
            values.push(t);
        }
        if let Some(extra) = map.keys().next() {
            return Err(ModelError::InvalidConfig(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            config,
            params: ParamStore { names, values },
        })
    }

    fn p(&self, name: &str) -> Tensor {
        self.params.get(name).expect("parameter present").clone()
    }

    pub fn encoder_params(&self) -> EncoderParams {
        EncoderParams {
            tok_emb: self.p("encoder.tok_emb"),
            tok_proj: self.p("encoder.tok_proj"),
            tok_bias: self.p("encoder.tok_bias"),
            patch_proj: self.p("encoder.patch_proj"),
            patch_bias: self.p("encoder.patch_bias"),
        }
    }

    pub fn head_projections(&self) -> Vec<HeadProjection> {
        (0..self.config.ot_heads)
            .map(|h| HeadProjection {
                w_t: self.p(&format!("ot.head{h}.w_t")),
                w_v: self.p(&format!("ot.head{h}.w_v")),
                lambda_spatial: self.p(&format!("ot.head{h}.lambda")).item(),
            })
            .collect()
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams {
            w_q: self.p("attention.w_q"),
            w_k: self.p("attention.w_k"),
            w_v: self.p("attention.w_v"),
            w_o: self.p("attention.w_o"),
            heads: self.config.attention_heads,
            w_g: self.p("gate.w"),
            gate_bias: self.p("gate.b").item(),
        }
    }

    pub fn vib_params(&self, beta: f64) -> VibParams {
        VibParams {
            w_mu: self.p("vib.w_mu"),
            b_mu: self.p("vib.b_mu"),
            w_sigma: self.p("vib.w_sigma"),
            b_sigma: self.p("vib.b_sigma"),
            w_c: self.p("vib.w_c"),
            b_c: self.p("vib.b_c"),
            beta,
        }
    }

    /// Places every parameter on `tape`, trainable or constant.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> ModelVars<'t> {
        let all: Vec<Var<'t>> = self
            .params
            .values
            .iter()
            .map(|v| if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        ModelVars::from_ordered(&self.config, all)
    }
}

/// Tape handles for all parameters, grouped by stage.
#[derive(Debug, Clone)]
pub struct ModelVars<'t> {
    pub all: Vec<Var<'t>>,
    pub encoder: EncoderVars<'t>,
    pub heads: Vec<HeadVars<'t>>,
    pub fusion: FusionVars<'t>,
    pub vib: VibVars<'t>,
}

impl<'t> ModelVars<'t> {
    /// `all` must follow [`ModelConfig::param_specs`] order.
    pub fn from_ordered(config: &ModelConfig, all: Vec<Var<'t>>) -> Self {
        let encoder = EncoderVars {
            tok_emb: all[0],
            tok_proj: all[1],
            tok_bias: all[2],
            patch_proj: all[3],
            patch_bias: all[4],
        };
        let mut k = 5;
        let heads = (0..config.ot_heads)
            .map(|_| {
                let h = HeadVars {
                    w_t: all[k],
                    w_v: all[k + 1],
                    lambda_spatial: all[k + 2],
                };
                k += 3;
                h
            })
            .collect();
        let fusion = FusionVars {
            w_q: all[k],
            w_k: all[k + 1],
            w_v: all[k + 2],
            w_o: all[k + 3],
            heads: config.attention_heads,
            w_g: all[k + 4],
            gate_bias: all[k + 5],
        };
        k += 6;
        let vib = VibVars {
            w_mu: all[k],
            b_mu: all[k + 1],
            w_sigma: all[k + 2],
            b_sigma: all[k + 3],
            w_c: all[k + 4],
            b_c: all[k + 5],
        };
        Self {
            all,
            encoder,
            heads,
            fusion,
            vib,
        }
    }
}

/// Tape outputs for one document.
#[derive(Debug, Clone)]
pub struct DocForward<'t> {
    /// `Σ_i CE_i` over the document's tokens.
    pub task_sum: Var<'t>,
    /// `Σ_i KL_i`; a constant zero when the bottleneck is disabled.
    pub kl_sum: Var<'t>,
    pub probs: Var<'t>,
    pub gate: Var<'t>,
    pub conf: Var<'t>,
    pub mu: Var<'t>,
    pub log_var: Var<'t>,
    pub t_prime: Var<'t>,
    pub plan: Option<Var<'t>>,
    pub head_stats: Vec<SinkhornStats>,
}

/// Runs one document through the pipeline on `tape`.
///
/// `epsilon` is the `n×d_z` reparameterization noise; `None` decodes with
/// the posterior mean.
pub fn forward_doc<'t>(
    tape: &'t Tape,
    vars: &ModelVars<'t>,
    config: &ModelConfig,
    inputs: &DocInputs,
    epsilon: Option<&Tensor>,
) -> Result<DocForward<'t>> {
    let n = inputs.n_tokens();
    let m = inputs.n_patches();
    let (t, v) = encode_on(tape, inputs, &vars.encoder)?;

    let (f_ot, conf, plan, head_stats) = if config.disable_ot {
        (None, tape.constant(Tensor::filled(&[n, 1], (m as f64).ln())), None, Vec::new())
    } else {
        let pos = PositionGrid::new(inputs.token_centers.clone(), inputs.patch_centers.clone())?;
        let dist = tape.constant(pos.distances());
        let (row_m, col_m) = (uniform(n), uniform(m));
        let mut plans = Vec::with_capacity(vars.heads.len());
        let mut stats = Vec::with_capacity(vars.heads.len());
        for h in &vars.heads {
            let cost = build_cost_on(t.matmul(h.w_t)?, v.matmul(h.w_v)?, dist, h.lambda_spatial)?;
            let (pi, st) = sinkhorn_on(cost, &config.sinkhorn, &row_m, &col_m)?;
            plans.push(pi);
            stats.push(st);
        }
        let p = average_heads_on(&plans)?;
        let conf = row_entropy_on(p)?;
        let f_ot = ot_aggregate_on(t, v, p, config.aggregation)?;
        (Some(f_ot), conf, Some(p), stats)
    };

    let f_att = cross_attention_on(t, v, &vars.fusion)?;
    let f = match f_ot {
        Some(f_ot) => fuse_on(f_att, f_ot)?,
        None => f_att,
    };
    let gate = if config.disable_gate {
        tape.constant(Tensor::filled(&[n, 1], 0.5))
    } else {
        gate_values_on(t, f, conf, vars.fusion.w_g, vars.fusion.gate_bias)?
    };
    let t_prime = interpolate_on(t, f, gate)?;

    let (mu, log_var) = encode_gaussian_on(t_prime, &vars.vib)?;
    let z = match epsilon {
        Some(eps) if !config.disable_vib => reparameterize_on(mu, log_var, tape.constant(eps.clone()))?,
        _ => mu,
    };
    let probs = logits_on(z, &vars.vib)?.softmax_rows()?;
    let task_sum = cross_entropy_sum_on(probs, tape.constant(inputs.target_matrix(config.classes)))?;
    let kl_sum = if config.disable_vib {
        tape.constant(Tensor::scalar(0.0))
    } else {
        kl_sum_on(mu, log_var)?
    };
    Ok(DocForward {
        task_sum,
        kl_sum,
        probs,
        gate,
        conf,
        mu,
        log_var,
        t_prime,
        plan,
        head_stats,
    })
}

/// Plain-valued per-document outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DocOutputs {
    pub doc_id: u64,
    /// Gold class per token, copied from the inputs.
    pub gold: Vec<usize>,
    pub probs: Tensor,
    pub predictions: Vec<usize>,
    pub gate: Vec<f64>,
    pub conf: Vec<f64>,
    pub mu: Tensor,
    pub log_var: Tensor,
    pub t_prime: Tensor,
    pub plan: Option<Tensor>,
    pub head_stats: Vec<SinkhornStats>,
    pub task_sum: f64,
    pub kl_sum: f64,
}

/// Posterior-mean inference on one document.
pub fn infer_doc(model: &Model, inputs: &DocInputs) -> Result<DocOutputs> {
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    let out = forward_doc(&tape, &vars, &model.config, inputs, None)?;
    let probs = out.probs.value();
    let predictions = (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect();
    Ok(DocOutputs {
        doc_id: inputs.doc_id,
        gold: inputs.targets.clone(),
        predictions,
        probs,
        gate: out.gate.value().into_data(),
        conf: out.conf.value().into_data(),
        mu: out.mu.value(),
        log_var: out.log_var.value(),
        t_prime: out.t_prime.value(),
        plan: out.plan.map(|p| p.value()),
        head_stats: out.head_stats,
        task_sum: out.task_sum.item(),
        kl_sum: out.kl_sum.item(),
    })
}

/// Width of the token-side constant inputs.
pub const TOKEN_SIDE_DIM: usize = 4 + POS_DIM;
