//! Attention path, transport-weighted local path, and the confidence gate
//! that decides how much fused visual signal each token receives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::ot::row_normalize_on;

type Result<T> = std::result::Result<T, AutodiffError>;

/// How the transport plan turns patch features into a per-token feature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// `T_i ⊙ Σ_j P̂_ij V_j`
    #[default]
    Modulated,
    /// `Σ_j P̂_ij V_j`
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
    /// `(2d+1)×1`
    pub w_g: Tensor,
    pub gate_bias: f64,
}

/// Tape handles for [`FusionParams`].
#[derive(Debug, Clone, Copy)]
pub struct FusionVars<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub w_o: Var<'t>,
    pub heads: usize,
    pub w_g: Var<'t>,
    /// `1×1`
    pub gate_bias: Var<'t>,
}

impl FusionParams {
    pub fn on<'t>(&self, tape: &'t Tape) -> FusionVars<'t> {
        FusionVars {
            w_q: tape.constant(self.w_q.clone()),
            w_k: tape.constant(self.w_k.clone()),
            w_v: tape.constant(self.w_v.clone()),
            w_o: tape.constant(self.w_o.clone()),
            heads: self.heads,
            w_g: tape.constant(self.w_g.clone()),
            gate_bias: tape.constant(Tensor::scalar(self.gate_bias)),
        }
    }
}

/// Per-token outputs of the fusion stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateState {
    pub f_att: Tensor,
    pub f_ot: Tensor,
    pub f_fusion: Tensor,
    pub conf: Vec<f64>,
    pub gate: Vec<f64>,
    pub t_prime: Tensor,
}

/// Multi-head scaled dot-product attention, `T` attending over `V`.
pub fn cross_attention_on<'t>(t: Var<'t>, v: Var<'t>, p: &FusionVars<'t>) -> Result<Var<'t>> {
    let d = p.w_q.value_ref().cols();
    if p.heads == 0 || d % p.heads != 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "cross_attention",
            msg: format!("{} heads do not divide width {d}", p.heads),
        });
    }
    let dh = d / p.heads;
    let q = t.matmul(p.w_q)?;
    let k = v.matmul(p.w_k)?;
    let val = v.matmul(p.w_v)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = val.slice_cols(h * dh, dh)?;
        let attn = qh.matmul(kh.transpose()?)?.scale(scale).softmax_rows()?;
        outs.push(attn.matmul(vh)?);
    }
    let joined = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs)? };
    joined.matmul(p.w_o)
}

/// Local path: each token reads the patches its plan row points at.
pub fn ot_aggregate_on<'t>(t: Var<'t>, v: Var<'t>, plan: Var<'t>, mode: AggregationMode) -> Result<Var<'t>> {
    let pv = row_normalize_on(plan).map_err(ot_to_autodiff)?.matmul(v)?;
    match mode {
        AggregationMode::Modulated => t.mul(pv),
        AggregationMode::Plain => Ok(pv),
    }
}

fn ot_to_autodiff(e: crate::ot::OtError) -> AutodiffError {
    match e {
        crate::ot::OtError::Autodiff(a) => a,
        other => AutodiffError::InvalidArgument {
            op: "ot_aggregate",
            msg: other.to_string(),
        },
    }
}

pub fn fuse_on<'t>(f_att: Var<'t>, f_ot: Var<'t>) -> Result<Var<'t>> {
    f_att.add(f_ot)
}

/// Gate logits are clamped to this range so `g` stays strictly inside (0, 1)
/// in floating point.
pub const GATE_LOGIT_BOUND: f64 = 30.0;

/// `g = σ([T ; F ; conf]·W_g + b)`, returned as `N×1`.
pub fn gate_values_on<'t>(
    t: Var<'t>,
    f_fusion: Var<'t>,
    conf: Var<'t>,
    w_g: Var<'t>,
    bias: Var<'t>,
) -> Result<Var<'t>> {
    Var::concat_cols(&[t, f_fusion, conf])?
        .matmul(w_g)?
        .add_row_vec(bias)
        .map(|x| x.clamp(-GATE_LOGIT_BOUND, GATE_LOGIT_BOUND).sigmoid())
}

/// `T' = T + g ⊙ (F − T)`, i.e. `g·F + (1−g)·T` row by row.
pub fn interpolate_on<'t>(t: Var<'t>, f_fusion: Var<'t>, gate: Var<'t>) -> Result<Var<'t>> {
    t.add(f_fusion.sub(t)?.mul_col_vec(gate)?)
}

pub fn cross_attention(t: &Tensor, v: &Tensor, params: &FusionParams) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.on(&tape);
    Ok(cross_attention_on(tape.constant(t.clone()), tape.constant(v.clone()), &p)?.value())
}

pub fn ot_aggregate(t: &Tensor, v: &Tensor, plan: &Tensor, mode: AggregationMode) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(ot_aggregate_on(
        tape.constant(t.clone()),
        tape.constant(v.clone()),
        tape.constant(plan.clone()),
        mode,
    )?
    .value())
}

pub fn fuse(f_att: &Tensor, f_ot: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(fuse_on(tape.constant(f_att.clone()), tape.constant(f_ot.clone()))?.value())
}

/// Gate and interpolate; `f_att`/`f_ot` are carried into the returned state.
pub fn gate_tokens(
    t: &Tensor,
    f_att: &Tensor,
    f_ot: &Tensor,
    conf: &[f64],
    w_g: &Tensor,
    bias: f64,
) -> Result<GateState> {
    let tape = Tape::new();
    let tv = tape.constant(t.clone());
    let f = fuse_on(tape.constant(f_att.clone()), tape.constant(f_ot.clone()))?;
    let c = tape.constant(Tensor::matrix(conf.len(), 1, conf.to_vec()));
    let g = gate_values_on(tv, f, c, tape.constant(w_g.clone()), tape.constant(Tensor::scalar(bias)))?;
    let t_prime = interpolate_on(tv, f, g)?;
    Ok(GateState {
        f_att: f_att.clone(),
        f_ot: f_ot.clone(),
        f_fusion: f.value(),
        conf: conf.to_vec(),
        gate: g.value().into_data(),
        t_prime: t_prime.value(),
    })
}
