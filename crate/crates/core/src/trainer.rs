//! Training, span-level evaluation, the text-only oracle and ablations.
//!
//! Each document in a batch runs on its own tape, and the per-document
//! gradients are summed in batch order. The sum is therefore the same for
//! any worker count, which keeps whole runs bit-reproducible.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::labels::Tag;
use crate::model::{forward_doc, infer_doc, DocOutputs, Model, ModelConfig, ModelError};
use crate::seeds::{mix, stream};
use crate::synthdoc::{DocInputs, SynthDocument};
use crate::vib::{beta_at, standard_normal};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("tag sequence {index}: predicted length {predicted} != gold length {gold}")]
    LengthMismatch {
        index: usize,
        predicted: usize,
        gold: usize,
    },
    #[error("{predicted} predicted sequences for {gold} gold sequences")]
    CountMismatch { predicted: usize, gold: usize },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Metrics of the last epoch that finished with finite losses.
        last_finite: Option<Box<EpochMetrics>>,
    },
    #[error("could not build worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimizer, schedule and model settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Default 1e-3. Pretrained-backbone recipes use 4e-5, which barely
    /// moves a small randomly initialised model.
    pub learning_rate: f64,
    /// Weight on the per-token KL term.
    pub beta: f64,
    /// Fraction of all steps over which `beta` ramps up linearly from 0.
    pub beta_warmup: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Threads used for per-document forward/backward. Does not affect
    /// results.
    pub workers: usize,
    /// Share of a dataset held out for evaluation by [`split_fraction`].
    pub eval_fraction: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 12,
            learning_rate: 1e-3,
            beta: 1e-3,
            beta_warmup: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            workers: 1,
            eval_fraction: 0.2,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The frozen benchmark recipe used by the acceptance suite and
    /// `configs/benchmark.json`. A larger step and KL weight than the
    /// defaults let unused latent dimensions reach the prior within 50
    /// epochs.
    pub fn benchmark() -> Self {
        Self {
            learning_rate: 3e-3,
            beta: 0.1,
            seed: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return bad("epochs, batch_size and workers must be >= 1".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad(format!("eval_fraction must lie in (0,1), got {}", self.eval_fraction));
        }
        if !(0.0..=1.0).contains(&self.beta_warmup) {
            return bad(format!("beta_warmup must lie in [0,1], got {}", self.beta_warmup));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0)
        {
            return bad("adam moments must lie in [0,1) and eps must be > 0".into());
        }
        self.model.validate()?;
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean cross-entropy per training token.
    pub task_loss: f64,
    /// Mean KL per training token, summed over latent dimensions.
    pub kl_loss: f64,
    /// Mean per-token objective with the `beta` in force at each step.
    pub total_loss: f64,
    pub eval_f1: f64,
    pub mean_gate: f64,
    pub mean_conf: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Writes one JSON object per epoch.
pub fn metrics_jsonl(history: &[EpochMetrics]) -> String {
    history.iter().map(|m| m.to_json_line() + "\n").collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *x -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// A labelled entity span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Span {
    pub kind: crate::labels::EntityKind,
    pub start: usize,
    pub end: usize,
}

/// BIO decoding. A `B-X` opens a span, following `I-X` tags extend it, and
/// a stray `I-X` opens a new span as if it were `B-X`.
pub fn extract_spans(tags: &[Tag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::Inside(k) if open.is_some_and(|s| s.kind == k) => {
                if let Some(s) = open.as_mut() {
                    s.end = i + 1;
                }
            }
            Tag::Begin(k) | Tag::Inside(k) => {
                spans.extend(open.take());
                open = Some(Span {
                    kind: k,
                    start: i,
                    end: i + 1,
                });
            }
            Tag::Outside => spans.extend(open.take()),
        }
    }
    spans.extend(open);
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpanScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Micro-averaged exact-match span F1 over paired sequences.
pub fn evaluate_f1(predictions: &[Vec<Tag>], gold: &[Vec<Tag>]) -> Result<SpanScore> {
    if predictions.len() != gold.len() {
        return Err(TrainError::CountMismatch {
            predicted: predictions.len(),
            gold: gold.len(),
        });
    }
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (index, (p, g)) in predictions.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(TrainError::LengthMismatch {
                index,
                predicted: p.len(),
                gold: g.len(),
            });
        }
        let ps = extract_spans(p);
        let gs = extract_spans(g);
        tp += ps.iter().filter(|s| gs.contains(s)).count();
        n_pred += ps.len();
        n_gold += gs.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, n_pred);
    let recall = ratio(tp, n_gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SpanScore {
        precision,
        recall,
        f1,
        true_positives: tp,
        predicted: n_pred,
        gold: n_gold,
    })
}

/// Span F1 of a classifier that tags every token with the label its id
/// carried most often in `train` (ties to the lower tag index; unseen ids
/// get the overall majority tag).
pub fn text_only_oracle(train: &[SynthDocument], eval: &[SynthDocument]) -> Result<f64> {
    if train.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if eval.is_empty() {
        return Err(TrainError::EmptySet("eval"));
    }
    let mut counts: HashMap<u32, [usize; Tag::ALL.len()]> = HashMap::new();
    let mut overall = [0usize; Tag::ALL.len()];
    for tok in train.iter().flat_map(|d| &d.tokens) {
        counts.entry(tok.id).or_default()[tok.label.index()] += 1;
        overall[tok.label.index()] += 1;
    }
    let argmax = |c: &[usize]| (0..c.len()).fold(0, |b, k| if c[k] > c[b] { k } else { b });
    let fallback = argmax(&overall);
    let pick: HashMap<u32, usize> = counts.iter().map(|(&id, c)| (id, argmax(c))).collect();
    let to_tag = |k: usize| Tag::from_index(k).expect("tag index");
    let preds: Vec<Vec<Tag>> = eval
        .iter()
        .map(|d| {
            d.tokens
                .iter()
                .map(|t| to_tag(pick.get(&t.id).copied().unwrap_or(fallback)))
                .collect()
        })
        .collect();
    let gold: Vec<Vec<Tag>> = eval.iter().map(SynthDocument::tags).collect();
    Ok(evaluate_f1(&preds, &gold)?.f1)
}

/// Model inputs for each document.
pub fn prepare_inputs(docs: &[SynthDocument], config: &ModelConfig) -> Result<Vec<DocInputs>> {
    docs.iter()
        .map(|d| DocInputs::from_doc(d, config.vocab, config.max_len).map_err(|e| ModelError::from(e).into()))
        .collect()
}

/// Signal/noise split of a per-dimension KL profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub signal_dims: Vec<usize>,
    pub noise_dims: Vec<usize>,
    pub signal_mean_kl: f64,
    pub noise_mean_kl: f64,
    /// `signal_mean_kl / noise_mean_kl`; infinite when the noise mean is 0.
    pub ratio: f64,
}

/// Fraction of the variance of each column of `mu` explained by the token
/// class (one-way ANOVA R²).
pub fn class_r2(mu: &Tensor, targets: &[usize]) -> Vec<f64> {
    let (n, dz) = (mu.rows(), mu.cols());
    let classes = targets.iter().max().map_or(0, |m| m + 1);
    (0..dz)
        .map(|k| {
            let mean = (0..n).map(|i| mu.get(i, k)).sum::<f64>() / n as f64;
            let mut sums = vec![0.0; classes];
            let mut counts = vec![0usize; classes];
            for i in 0..n {
                sums[targets[i]] += mu.get(i, k);
                counts[targets[i]] += 1;
            }
            let total: f64 = (0..n).map(|i| (mu.get(i, k) - mean).powi(2)).sum();
            let within: f64 = (0..n)
                .map(|i| (mu.get(i, k) - sums[targets[i]] / counts[targets[i]] as f64).powi(2))
                .sum();
            if total > 0.0 {
                1.0 - within / total
            } else {
                0.0
            }
        })
        .collect()
}

/// Ranks latent dimensions by [`class_r2`] and compares the mean KL of the
/// top `d_z − noise_dims` against the rest.
pub fn collapse_report(profile: &[f64], r2: &[f64], noise_dims: usize) -> CollapseReport {
    let dz = profile.len();
    let mut order: Vec<usize> = (0..dz).collect();
    order.sort_by(|&a, &b| r2[b].total_cmp(&r2[a]).then(a.cmp(&b)));
    let n_signal = dz.saturating_sub(noise_dims);
    let (signal, noise) = order.split_at(n_signal);
    let mean = |ix: &[usize]| {
        if ix.is_empty() {
            0.0
        } else {
            ix.iter().map(|&k| profile[k]).sum::<f64>() / ix.len() as f64
        }
    };
    let (s, z) = (mean(signal), mean(noise));
    CollapseReport {
        signal_dims: signal.to_vec(),
        noise_dims: noise.to_vec(),
        signal_mean_kl: s,
        noise_mean_kl: z,
        ratio: if z > 0.0 { s / z } else { f64::INFINITY },
    }
}

/// Evaluation-set summary of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub score: SpanScore,
    pub mean_gate: f64,
    pub mean_conf: f64,
    pub outputs: Vec<DocOutputs>,
}

impl Evaluation {
    /// Mean KL per latent dimension over all evaluation tokens.
    pub fn kl_profile(&self) -> Vec<f64> {
        let dz = self.outputs.first().map_or(0, |o| o.mu.cols());
        let mut out = vec![0.0; dz];
        let mut n = 0usize;
        for o in &self.outputs {
            for i in 0..o.mu.rows() {
                for (k, acc) in out.iter_mut().enumerate() {
                    let (m, lv) = (o.mu.get(i, k), o.log_var.get(i, k));
                    *acc += 0.5 * (m * m + lv.exp() - 1.0 - lv);
                }
                n += 1;
            }
        }
        if n > 0 {
            out.iter_mut().for_each(|x| *x /= n as f64);
        }
        out
    }

    /// Latent means stacked over all evaluation tokens, with their classes.
    pub fn stacked_mu(&self) -> (Tensor, Vec<usize>) {
        let dz = self.outputs.first().map_or(0, |o| o.mu.cols());
        let mut data = Vec::new();
        let mut targets = Vec::new();
        for o in &self.outputs {
            data.extend_from_slice(o.mu.data());
        }
        let rows = data.len() / dz.max(1);
        for o in &self.outputs {
            targets.extend(o.gold.iter().copied());
        }
        (Tensor::matrix(rows, dz, data), targets)
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))
}

/// Posterior-mean predictions, span F1 and gate/confidence means.
pub fn evaluate(model: &Model, inputs: &[DocInputs], workers: usize) -> Result<Evaluation> {
    if inputs.is_empty() {
        return Err(TrainError::EmptySet("eval"));
    }
    let pool = build_pool(workers)?;
    evaluate_in(&pool, model, inputs)
}

fn evaluate_in(pool: &rayon::ThreadPool, model: &Model, inputs: &[DocInputs]) -> Result<Evaluation> {
    let outputs: Vec<DocOutputs> = pool.install(|| {
        inputs
            .par_iter()
            .map(|i| infer_doc(model, i))
            .collect::<std::result::Result<_, _>>()
    })?;
    let to_tags = |ix: &[usize]| -> Vec<Tag> { ix.iter().map(|&k| Tag::from_index(k).unwrap_or(Tag::Outside)).collect() };
    let preds: Vec<Vec<Tag>> = outputs.iter().map(|o| to_tags(&o.predictions)).collect();
    let gold: Vec<Vec<Tag>> = inputs.iter().map(|i| to_tags(&i.targets)).collect();
    let score = evaluate_f1(&preds, &gold)?;
    let n: usize = outputs.iter().map(|o| o.gate.len()).sum();
    let mean_gate = outputs.iter().flat_map(|o| &o.gate).sum::<f64>() / n as f64;
    let mean_conf = outputs.iter().flat_map(|o| &o.conf).sum::<f64>() / n as f64;
    Ok(Evaluation {
        score,
        mean_gate,
        mean_conf,
        outputs,
    })
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    /// Per-dimension mean KL on the eval set; `None` when the bottleneck is
    /// disabled (`z = μ`).
    pub kl_profile: Option<Vec<f64>>,
    pub collapse: Option<CollapseReport>,
    pub final_eval: Evaluation,
    pub wall_clock_secs: f64,
}

impl TrainOutcome {
    pub fn final_f1(&self) -> f64 {
        self.final_eval.score.f1
    }
}

struct DocStep {
    grads: Vec<Tensor>,
    task: f64,
    kl: f64,
}

fn doc_step(model: &Model, inputs: &DocInputs, beta: f64, n_batch: f64, noise_seed: u64) -> Result<DocStep> {
    let cfg = &model.config;
    let tape = Tape::new();
    let vars = model.bind(&tape, true);
    let eps = (!cfg.disable_vib).then(|| standard_normal(inputs.n_tokens(), cfg.d_z, noise_seed));
    let out = forward_doc(&tape, &vars, cfg, inputs, eps.as_ref())?;
    let loss = out
        .task_sum
        .add(out.kl_sum.scale(beta))
        .map_err(ModelError::from)?
        .scale(1.0 / n_batch);
    tape.backward(loss).map_err(ModelError::from)?;
    Ok(DocStep {
        grads: vars.all.iter().map(|&v| tape.grad_or_zeros(v)).collect(),
        task: out.task_sum.item(),
        kl: out.kl_sum.item(),
    })
}

/// Trains from a seeded initialisation for `config.epochs` epochs,
/// evaluating on `eval_docs` after each one.
pub fn train(config: &TrainConfig, train_docs: &[SynthDocument], eval_docs: &[SynthDocument]) -> Result<TrainOutcome> {
    train_with(config, train_docs, eval_docs, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &TrainConfig,
    train_docs: &[SynthDocument],
    eval_docs: &[SynthDocument],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_docs.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if eval_docs.is_empty() {
        return Err(TrainError::EmptySet("eval"));
    }
    let started = Instant::now();
    let mcfg = &config.model;
    let train_in = prepare_inputs(train_docs, mcfg)?;
    let eval_in = prepare_inputs(eval_docs, mcfg)?;
    let pool = build_pool(config.workers)?;

    let mut model = Model::init(mcfg.clone(), config.seed)?;
    let mut adam = Adam::new(
        &model.params.values,
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let steps_per_epoch = train_in.len().div_ceil(config.batch_size);
    let warmup = (config.beta_warmup * (steps_per_epoch * config.epochs) as f64).round() as usize;
    let mut history: Vec<EpochMetrics> = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_in.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[config.seed, stream::SHUFFLE, epoch as u64])));
        let (mut task, mut kl, mut total, mut tokens) = (0.0, 0.0, 0.0, 0usize);

        for batch in order.chunks(config.batch_size) {
            let beta = if mcfg.disable_vib {
                0.0
            } else {
                beta_at(config.beta, step, warmup)
            };
            let n_batch: usize = batch.iter().map(|&i| train_in[i].n_tokens()).sum();
            let results: Vec<DocStep> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let doc = &train_in[i];
                        let seed = mix(&[config.seed, stream::NOISE, doc.doc_id, step as u64]);
                        doc_step(&model, doc, beta, n_batch.max(1) as f64, seed)
                    })
                    .collect::<Result<_>>()
            })?;
            let mut grads: Vec<Tensor> = model.params.values.iter().map(|p| Tensor::zeros(p.shape())).collect();
            let (mut b_task, mut b_kl) = (0.0, 0.0);
            for r in &results {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                b_task += r.task;
                b_kl += r.kl;
            }
            let diverged = !(b_task.is_finite() && b_kl.is_finite())
                || grads.iter().any(|g| !g.all_finite());
            if diverged {
                return Err(TrainError::Diverged {
                    epoch,
                    last_finite: history.last().cloned().map(Box::new),
                });
            }
            adam.step(&mut model.params.values, &grads);
            task += b_task;
            kl += b_kl;
            total += b_task + beta * b_kl;
            tokens += n_batch;
            step += 1;
        }

        let ev = evaluate_in(&pool, &model, &eval_in)?;
        let tokens = tokens.max(1) as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            task_loss: task / tokens,
            kl_loss: kl / tokens,
            total_loss: total / tokens,
            eval_f1: ev.score.f1,
            mean_gate: ev.mean_gate,
            mean_conf: ev.mean_conf,
        };
        on_epoch(&m);
        history.push(m);
    }

    let final_eval = evaluate_in(&pool, &model, &eval_in)?;
    let (kl_profile, collapse) = if mcfg.disable_vib {
        (None, None)
    } else {
        let profile = final_eval.kl_profile();
        let (mu, targets) = final_eval.stacked_mu();
        let report = collapse_report(&profile, &class_r2(&mu, &targets), mcfg.d_z / 2);
        (Some(profile), Some(report))
    };
    Ok(TrainOutcome {
        model,
        history,
        kl_profile,
        collapse,
        final_eval,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// The fixed train/eval split: the last `eval_count` documents are held out.
pub fn split_holdout(docs: &[SynthDocument], eval_count: usize) -> (&[SynthDocument], &[SynthDocument]) {
    let cut = docs.len().saturating_sub(eval_count);
    docs.split_at(cut)
}

/// Holds out the last `round(fraction·len)` documents (at least one, and at
/// least one left for training when there are two or more).
pub fn split_fraction(docs: &[SynthDocument], fraction: f64) -> (&[SynthDocument], &[SynthDocument]) {
    let n = docs.len();
    let eval = ((fraction * n as f64).round() as usize).clamp(1.min(n), n.saturating_sub(1).max(1.min(n)));
    split_holdout(docs, eval)
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoOt,
    NoVib,
    NoGate,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoOt, Variant::NoVib, Variant::NoGate];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoOt => "no_ot",
            Variant::NoVib => "no_vib",
            Variant::NoGate => "no_gate",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.model.disable_ot = self == Variant::NoOt;
        c.model.disable_vib = self == Variant::NoVib;
        c.model.disable_gate = self == Variant::NoGate;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub f1: Vec<f64>,
    pub f1_mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single seed.
    pub f1_std: f64,
    /// Signal/noise KL ratio per seed; empty for `no_vib`.
    pub kl_ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:>8} {:>8} {:>6}\n", "variant", "f1_mean", "f1_std", "seeds");
        for r in &self.rows {
            s += &format!(
                "{:<8} {:>8.4} {:>8.4} {:>6}\n",
                r.variant.name(),
                r.f1_mean,
                r.f1_std,
                r.seeds.len()
            );
        }
        s
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Trains every `variant × seed` pair (seed overrides `base.seed`).
pub fn run_variants(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    train_docs: &[SynthDocument],
    eval_docs: &[SynthDocument],
    mut on_run: impl FnMut(Variant, u64, &TrainOutcome),
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut f1 = Vec::with_capacity(seeds.len());
        let mut kl_ratio = Vec::new();
        for &seed in seeds {
            let mut cfg = variant.apply(base);
            cfg.seed = seed;
            let out = train(&cfg, train_docs, eval_docs)?;
            f1.push(out.final_f1());
            kl_ratio.extend(out.collapse.as_ref().map(|c| c.ratio));
            on_run(variant, seed, &out);
        }
        let (f1_mean, f1_std) = mean_std(&f1);
        rows.push(AblationRow {
            variant,
            seeds: seeds.to_vec(),
            f1,
            f1_mean,
            f1_std,
            kl_ratio,
        });
    }
    Ok(AblationTable { rows })
}

/// Seeds used by the ablation suite: `base, base+1, …`.
pub fn ablation_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| base.wrapping_add(k)).collect()
}

/// The four variants over five seeds.
pub fn run_ablation_suite(
    base: &TrainConfig,
    train_docs: &[SynthDocument],
    eval_docs: &[SynthDocument],
) -> Result<AblationTable> {
    run_variants(base, &Variant::ALL, &ablation_seeds(base.seed, 5), train_docs, eval_docs, |_, _, _| {})
}
