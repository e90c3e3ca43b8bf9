//! Whole-model gradient verification and post-training reports.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::check::{finite_diff_check_on, primitive_suite};
use crate::autodiff::{AutodiffError, GradCheckError, OpKind, Tape, Tensor};
use crate::labels::Tag;
use crate::model::{forward_doc, infer_doc, Model, ModelConfig, ModelError, ModelVars};
use crate::ot::SinkhornConfig;
use crate::synthdoc::{DocInputs, SynthDocument, SynthToken};
use crate::trainer::{class_r2, collapse_report, evaluate_f1, prepare_inputs, CollapseReport, TrainError};
use crate::vib::standard_normal;

/// Relative-error threshold for every gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;
/// KL weight used in the micro-instance loss.
pub const MICRO_BETA: f64 = 0.5;

/// The 4-token, 6-patch instance: model width 8, two transport heads, a
/// fixed 20-step Sinkhorn unroll (`tol = 0`) and frozen noise.
pub struct MicroInstance {
    pub model: Model,
    pub inputs: DocInputs,
    pub epsilon: Tensor,
}

pub fn micro_instance(seed: u64) -> Result<MicroInstance, ModelError> {
    let config = ModelConfig {
        d: 8,
        embed_dim: 4,
        ot_heads: 2,
        attention_heads: 2,
        d_z: 4,
        vocab: 16,
        patch_dim: 6,
        sinkhorn: SinkhornConfig {
            tau: 0.5,
            max_iters: 20,
            tol: 0.0,
        },
        lambda_init: 0.3,
        ..Default::default()
    };
    let mut model = Model::init(config, seed)?;
    // Init leaves the gate, biases and variance map at zero. Random values
    // make every path carry a non-trivial gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in model.params.names.iter().zip(model.params.values.iter_mut()) {
        if !name.ends_with(".lambda") {
            t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.6..0.6));
        }
    }
    let tags = ["B-Q", "I-Q", "B-A", "O"];
    let tokens = tags
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let x = 0.1 + 0.2 * i as f64;
            SynthToken {
                id: rng.gen_range(0..16),
                bbox: [x, 0.2 + 0.1 * i as f64, x + 0.15, 0.3 + 0.1 * i as f64],
                label: t.parse::<Tag>().expect("tag literal"),
            }
        })
        .collect();
    let patches = (0..6).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let doc = SynthDocument {
        doc_id: 0,
        tokens,
        patches,
        seed,
    };
    // a 3×2 patch layout, which a square grid cannot express
    let centers = (0..6)
        .map(|k| [(k % 3) as f64 / 3.0 + 1.0 / 6.0, (k / 3) as f64 / 2.0 + 0.25])
        .collect();
    let inputs = DocInputs::with_patch_centers(&doc, 16, 32, centers).map_err(ModelError::from)?;
    let epsilon = standard_normal(4, 4, seed ^ 0xe95);
    Ok(MicroInstance { model, inputs, epsilon })
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrimitiveCheck {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub groups: Vec<GroupCheck>,
    pub primitives: Vec<PrimitiveCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradientReport {
    pub fn failing_ops(&self) -> Vec<&'static str> {
        self.primitives.iter().filter(|p| !p.passed).map(|p| p.op).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("parameter groups (full loss, micro-instance)\n");
        for g in &self.groups {
            s += &format!(
                "  {:<10} {:.3e}  {}\n",
                g.group,
                g.max_rel_error,
                if g.passed { "ok" } else { "FAIL" }
            );
        }
        s += "primitives\n";
        for p in &self.primitives {
            s += &format!(
                "  {:<24} {:.3e}  {}\n",
                p.op,
                p.max_rel_error,
                if p.passed { "ok" } else { "FAIL" }
            );
        }
        if self.passed {
            s += &format!("PASS (max relative error {:.3e} < {:e})\n", self.max_rel_error, self.tolerance);
        } else {
            s += &format!("FAIL (max relative error {:.3e})", self.max_rel_error);
            let ops = self.failing_ops();
            if !ops.is_empty() {
                s += &format!("; failing ops: {}", ops.join(", "));
            }
            s += "\n";
        }
        s
    }
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Full micro-instance loss `task/N + β·kl/N` on `tape`.
pub fn micro_loss<'t>(tape: &'t Tape, params: &[crate::autodiff::Var<'t>], inst: &MicroInstance) -> Result<crate::autodiff::Var<'t>, AutodiffError> {
    let vars = ModelVars::from_ordered(&inst.model.config, params.to_vec());
    let out = forward_doc(tape, &vars, &inst.model.config, &inst.inputs, Some(&inst.epsilon)).map_err(|e| match e {
        ModelError::Autodiff(a) => a,
        other => AutodiffError::InvalidArgument {
            op: "forward",
            msg: other.to_string(),
        },
    })?;
    let n = inst.inputs.n_tokens() as f64;
    Ok(out.task_sum.add(out.kl_sum.scale(MICRO_BETA))?.scale(1.0 / n))
}

/// Checks the full loss of the micro-instance against central differences,
/// grouped by parameter prefix, then every primitive on its own instance.
/// `fault` negates one primitive's local derivative on the analytic tape.
pub fn check_gradients(fault: Option<OpKind>) -> Result<GradientReport, GradCheckError> {
    let inst = micro_instance(1).map_err(|e| {
        GradCheckError::Autodiff(AutodiffError::InvalidArgument {
            op: "micro_instance",
            msg: e.to_string(),
        })
    })?;
    let make_tape = || match fault {
        Some(k) => Tape::with_injected_fault(k),
        None => Tape::new(),
    };
    let full = finite_diff_check_on(make_tape, &inst.model.params.values, GRAD_STEP, |tape, vars| {
        micro_loss(tape, vars, &inst)
    })?;
    let mut groups: Vec<GroupCheck> = Vec::new();
    for pc in &full.params {
        let name = &inst.model.params.names[pc.param];
        let group = group_of(name);
        match groups.iter_mut().find(|g| g.group == group) {
            Some(g) if pc.max_rel_error > g.max_rel_error => {
                g.max_rel_error = pc.max_rel_error;
                g.worst_param = name.clone();
            }
            Some(_) => {}
            None => groups.push(GroupCheck {
                group: group.to_string(),
                max_rel_error: pc.max_rel_error,
                worst_param: name.clone(),
                passed: true,
            }),
        }
    }
    groups.iter_mut().for_each(|g| g.passed = g.max_rel_error < GRAD_TOLERANCE);

    let primitives: Vec<PrimitiveCheck> = primitive_suite(7, GRAD_STEP, fault)?
        .into_iter()
        .map(|(k, r)| PrimitiveCheck {
            op: k.name(),
            max_rel_error: r.max_rel_error,
            passed: r.max_rel_error < GRAD_TOLERANCE,
        })
        .collect();
    let max_rel_error = groups
        .iter()
        .map(|g| g.max_rel_error)
        .chain(primitives.iter().map(|p| p.max_rel_error))
        .fold(0.0, f64::max);
    let passed = groups.iter().all(|g| g.passed) && primitives.iter().all(|p| p.passed);
    Ok(GradientReport {
        groups,
        primitives,
        max_rel_error,
        tolerance: GRAD_TOLERANCE,
        passed,
    })
}

/// Per-token gate value and alignment entropy.
#[derive(Debug, Clone, Serialize)]
pub struct TokenDiagnostics {
    pub doc_id: u64,
    pub token: usize,
    pub gate: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseReport {
    pub documents: usize,
    pub span_f1: f64,
    /// `{dim_index: mean KL}`; empty when the bottleneck is disabled.
    pub kl_profile: BTreeMap<usize, f64>,
    pub collapse: Option<CollapseReport>,
    pub tokens: Vec<TokenDiagnostics>,
    /// One entry per document and transport head.
    pub marginal_violations: Vec<f64>,
    pub max_marginal_violation: f64,
    /// Solves that stopped at `max_iters` with violation above `tol`.
    pub unconverged_solves: usize,
    pub gates_in_open_unit_interval: bool,
}

/// Posterior-mean pass over `docs` collecting the quantities the analysis
/// needs. The signal/noise split uses `d_z / 2` noise dimensions.
pub fn diagnose(model: &Model, docs: &[SynthDocument]) -> Result<DiagnoseReport, TrainError> {
    if docs.is_empty() {
        return Err(TrainError::EmptySet("diagnose"));
    }
    let inputs = prepare_inputs(docs, &model.config)?;
    let outputs = inputs
        .iter()
        .map(|i| infer_doc(model, i))
        .collect::<Result<Vec<_>, _>>()?;
    let to_tags = |ix: &[usize]| -> Vec<Tag> { ix.iter().map(|&k| Tag::from_index(k).unwrap_or(Tag::Outside)).collect() };
    let preds: Vec<_> = outputs.iter().map(|o| to_tags(&o.predictions)).collect();
    let gold: Vec<_> = outputs.iter().map(|o| to_tags(&o.gold)).collect();
    let span_f1 = evaluate_f1(&preds, &gold)?.f1;

    let mut tokens = Vec::new();
    let mut marginal_violations = Vec::new();
    for o in &outputs {
        for (k, (&gate, &entropy)) in o.gate.iter().zip(&o.conf).enumerate() {
            tokens.push(TokenDiagnostics {
                doc_id: o.doc_id,
                token: k,
                gate,
                entropy,
            });
        }
        marginal_violations.extend(o.head_stats.iter().map(|s| s.marginal_violation));
    }
    let (kl_profile, collapse) = if model.config.disable_vib {
        (BTreeMap::new(), None)
    } else {
        let dz = model.config.d_z;
        let mut profile = vec![0.0; dz];
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for o in &outputs {
            for i in 0..o.mu.rows() {
                for (k, p) in profile.iter_mut().enumerate() {
                    let (m, lv) = (o.mu.get(i, k), o.log_var.get(i, k));
                    *p += 0.5 * (m * m + lv.exp() - 1.0 - lv);
                }
            }
            rows.extend_from_slice(o.mu.data());
            targets.extend_from_slice(&o.gold);
        }
        let n = targets.len().max(1) as f64;
        profile.iter_mut().for_each(|p| *p /= n);
        let mu = Tensor::matrix(targets.len(), dz, rows);
        let report = collapse_report(&profile, &class_r2(&mu, &targets), dz / 2);
        (profile.into_iter().enumerate().collect(), Some(report))
    };
    Ok(DiagnoseReport {
        documents: docs.len(),
        span_f1,
        kl_profile,
        collapse,
        gates_in_open_unit_interval: tokens.iter().all(|t| t.gate > 0.0 && t.gate < 1.0),
        max_marginal_violation: marginal_violations.iter().copied().fold(0.0, f64::max),
        unconverged_solves: marginal_violations.iter().filter(|v| **v > model.config.sinkhorn.tol).count(),
        marginal_violations,
        tokens,
    })
}
