//! Central-difference gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::{AutodiffError, OpKind, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite value while perturbing parameter {param} entry {index}")]
    NonFinite { param: usize, index: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Result for one parameter tensor.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub param: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

/// `|a − n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of `f` at `params` with central differences of
/// step `h`, returning the max relative error per parameter tensor.
pub fn finite_diff_check<F>(params: &[Tensor], h: f64, f: F) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AutodiffError>,
{
    finite_diff_check_on(Tape::new, params, h, f)
}

/// Like [`finite_diff_check`] but the analytic gradient is taken on a tape
/// produced by `make_tape` (used to inject faults).
pub fn finite_diff_check_on<F>(
    make_tape: impl Fn() -> Tape,
    params: &[Tensor],
    h: f64,
    f: F,
) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AutodiffError>,
{
    if !(h > 0.0) {
        return Err(GradCheckError::InvalidStep(h));
    }
    let analytic: Vec<Tensor> = {
        let tape = make_tape();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter().map(|v| tape.grad_or_zeros(*v)).collect()
    };

    let eval = |ps: &[Tensor]| -> Result<f64, AutodiffError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        max_rel_error: 0.0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            param: pi,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..params[pi].len() {
            let orig = params[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[idx];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(GradCheckError::NonFinite { param: pi, index: idx });
            }
            let err = relative_error(a, numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = idx;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Checks one primitive on a random instance. The loss is `Σ w ⊙ op(x…)`
/// with fixed random weights `w`, so every output entry matters.
pub fn check_primitive(
    kind: OpKind,
    seed: u64,
    h: f64,
    fault: Option<OpKind>,
) -> Result<GradCheckReport, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9e37_79b9));
    let (n, m, k) = (3, 4, 2);
    let u = |rng: &mut ChaCha8Rng, r, c| random_tensor(rng, r, c, -2.0, 2.0);
    let pos = |rng: &mut ChaCha8Rng, r, c| random_tensor(rng, r, c, 0.5, 2.0);
    let inputs: Vec<Tensor> = match kind {
        OpKind::MatMul => vec![u(&mut rng, n, k), u(&mut rng, k, m)],
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![u(&mut rng, n, m), u(&mut rng, n, m)],
        OpKind::AddRowVec | OpKind::LogSumExpRowsShifted => vec![u(&mut rng, n, m), u(&mut rng, 1, m)],
        OpKind::AddColVec | OpKind::MulColVec | OpKind::LogSumExpColsShifted => vec![u(&mut rng, n, m), u(&mut rng, n, 1)],
        OpKind::MulScalar => vec![u(&mut rng, n, m), u(&mut rng, 1, 1)],
        OpKind::Log | OpKind::Recip => vec![pos(&mut rng, n, m)],
        OpKind::ConcatCols => vec![u(&mut rng, n, k), u(&mut rng, n, m)],
        // keep clear of the clamp boundaries where the derivative jumps
        OpKind::Clamp => vec![Tensor::matrix(
            n,
            m,
            (0..n * m)
                .map(|i| if i % 2 == 0 { rng.gen_range(-0.9..0.9) } else { rng.gen_range(1.1..2.0) })
                .collect(),
        )],
        _ => vec![u(&mut rng, n, m)],
    };
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        apply(kind, &vars)?.shape()
    };
    let weights = random_tensor(&mut rng, out_shape[0], out_shape[1], -1.0, 1.0);
    let col_weights = random_tensor(&mut rng, out_shape[1], 1, -1.0, 1.0);
    let make_tape = || match fault {
        Some(f) => Tape::with_injected_fault(f),
        None => Tape::new(),
    };
    finite_diff_check_on(make_tape, &inputs, h, |tape, vars| {
        let out = apply(kind, vars)?;
        // the reduction must not reuse the op under test, or an injected
        // fault would cancel itself
        match kind {
            OpKind::Mul => Ok(out.matmul(tape.constant(col_weights.clone()))?.mean()),
            OpKind::Sum => Ok(out.mul(tape.constant(weights.clone()))?.mean()),
            _ => Ok(out.mul(tape.constant(weights.clone()))?.sum()),
        }
    })
}

fn apply<'t>(kind: OpKind, v: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
    Ok(match kind {
        OpKind::Leaf => v[0],
        OpKind::MatMul => v[0].matmul(v[1])?,
        OpKind::Add => v[0].add(v[1])?,
        OpKind::Sub => v[0].sub(v[1])?,
        OpKind::Mul => v[0].mul(v[1])?,
        OpKind::AddRowVec => v[0].add_row_vec(v[1])?,
        OpKind::AddColVec => v[0].add_col_vec(v[1])?,
        OpKind::MulColVec => v[0].mul_col_vec(v[1])?,
        OpKind::MulScalar => v[0].mul_scalar(v[1])?,
        OpKind::Scale => v[0].scale(-1.7),
        OpKind::AddScalar => v[0].add_scalar(0.3),
        OpKind::Exp => v[0].exp(),
        OpKind::Log => v[0].log(),
        OpKind::Recip => v[0].recip(),
        OpKind::Sigmoid => v[0].sigmoid(),
        OpKind::SoftmaxRows => v[0].softmax_rows()?,
        OpKind::LogSumExpRows => v[0].logsumexp_rows()?,
        OpKind::LogSumExpCols => v[0].logsumexp_cols()?,
        OpKind::LogSumExpRowsShifted => v[0].logsumexp_rows_shifted(v[1])?,
        OpKind::LogSumExpColsShifted => v[0].logsumexp_cols_shifted(v[1])?,
        OpKind::Sum => v[0].sum(),
        OpKind::Mean => v[0].mean(),
        OpKind::SumRows => v[0].sum_rows()?,
        OpKind::SumCols => v[0].sum_cols()?,
        OpKind::ConcatCols => Var::concat_cols(v)?,
        OpKind::SliceRows => v[0].slice_rows(1, 2)?,
        OpKind::SliceCols => v[0].slice_cols(1, 2)?,
        OpKind::Clamp => v[0].clamp(-1.0, 1.0),
        OpKind::Transpose => v[0].transpose()?,
    })
}

/// Runs [`check_primitive`] for every primitive.
pub fn primitive_suite(
    seed: u64,
    h: f64,
    fault: Option<OpKind>,
) -> Result<Vec<(OpKind, GradCheckReport)>, GradCheckError> {
    OpKind::PRIMITIVES
        .into_iter()
        .map(|k| check_primitive(k, seed, h, fault).map(|r| (k, r)))
        .collect()
}
