//! Multi-head entropic optimal-transport alignment between token features
//! and patch features.
//!
//! Each head projects both sides into a `d_h`-wide subspace and builds
//!
//! ```text
//! C_ij = −⟨T_h[i], V_h[j]⟩ / √d_h + λ_h · ‖pos_T(i) − pos_V(j)‖₂
//! ```
//!
//! which is solved with log-domain Sinkhorn under uniform marginals. The head
//! plans are averaged into one alignment matrix.
//!
//! Two Sinkhorn implementations live here: [`sinkhorn_on`] records every
//! iteration on a [`Tape`] so gradients flow through the unrolled solver, and
//! [`sinkhorn`] is a plain `f64` solver used by diagnostics and as an
//! independent check of the taped one.

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{logsumexp, AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum OtError {
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("{which} marginal sums to {sum}, expected 1")]
    NotNormalized { which: &'static str, sum: f64 },
    #[error("{which} marginal has a non-positive entry")]
    NonPositiveMarginal { which: &'static str },
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("exact oracle limited to n <= 8, got {0}")]
    OracleTooLarge(usize),
    #[error("max_iters must be at least 1")]
    NoIterations,
    #[error("no plans to average")]
    NoPlans,
    #[error("coordinate {0} outside the unit square")]
    PositionOutOfRange(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, OtError>;

/// Normalized 2-D centers of tokens and patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    pub tokens: Vec<[f64; 2]>,
    pub patches: Vec<[f64; 2]>,
}

impl PositionGrid {
    pub fn new(tokens: Vec<[f64; 2]>, patches: Vec<[f64; 2]>) -> Result<Self> {
        for c in tokens.iter().chain(&patches).flatten() {
            if !(0.0..=1.0).contains(c) {
                return Err(OtError::PositionOutOfRange(*c));
            }
        }
        Ok(Self { tokens, patches })
    }

    /// Centers of a `g×g` grid in row-major order, `(x, y)` with `x` across.
    pub fn grid_centers(g: usize) -> Vec<[f64; 2]> {
        (0..g * g)
            .map(|j| {
                let (r, c) = (j / g, j % g);
                [(c as f64 + 0.5) / g as f64, (r as f64 + 0.5) / g as f64]
            })
            .collect()
    }

    /// `N×M` Euclidean distances.
    pub fn distances(&self) -> Tensor {
        let data = self
            .tokens
            .iter()
            .flat_map(|t| {
                self.patches
                    .iter()
                    .map(move |p| ((t[0] - p[0]).powi(2) + (t[1] - p[1]).powi(2)).sqrt())
            })
            .collect();
        Tensor::matrix(self.tokens.len(), self.patches.len(), data)
    }
}

/// Learnable projections of one alignment head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    pub w_t: Tensor,
    pub w_v: Tensor,
    pub lambda_spatial: f64,
}

impl HeadProjection {
    pub fn head_dim(&self) -> usize {
        self.w_t.cols()
    }
}

/// Tape-side handles for a [`HeadProjection`].
#[derive(Debug, Clone, Copy)]
pub struct HeadVars<'t> {
    pub w_t: Var<'t>,
    pub w_v: Var<'t>,
    /// `1×1`.
    pub lambda_spatial: Var<'t>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: Tensor,
    pub head_index: usize,
}

/// Solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub tau: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

/// A nonnegative `N×M` coupling with its marginals and solver stats.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub pi: Tensor,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub tau: f64,
    pub iterations_used: usize,
    /// Max-norm deviation of row and column sums from the marginals.
    pub marginal_violation: f64,
}

#[derive(Serialize)]
struct PlanDump<'a> {
    shape: [usize; 2],
    tau: f64,
    iterations_used: usize,
    marginal_violation: f64,
    values: &'a [f64],
}

impl TransportPlan {
    pub fn shape(&self) -> (usize, usize) {
        (self.pi.rows(), self.pi.cols())
    }

    /// `{shape, tau, iterations_used, marginal_violation, values}` with
    /// values in row-major order.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(PlanDump {
            shape: [self.pi.rows(), self.pi.cols()],
            tau: self.tau,
            iterations_used: self.iterations_used,
            marginal_violation: self.marginal_violation,
            values: self.pi.data(),
        })
        .expect("plan serializes")
    }

    /// `⟨C, π⟩`.
    pub fn cost(&self, c: &Tensor) -> f64 {
        self.pi.data().iter().zip(c.data()).map(|(p, c)| p * c).sum()
    }
}

/// Max-norm marginal violation of `pi` against `a` (rows) and `b` (cols).
pub fn marginal_violation(pi: &Tensor, a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (pi.rows(), pi.cols());
    let mut worst: f64 = 0.0;
    for i in 0..n {
        worst = worst.max((pi.row(i).iter().sum::<f64>() - a[i]).abs());
    }
    for j in 0..m {
        let s: f64 = (0..n).map(|i| pi.get(i, j)).sum();
        worst = worst.max((s - b[j]).abs());
    }
    worst
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn validate_marginal(which: &'static str, m: &[f64]) -> Result<()> {
    if m.iter().any(|&x| !(x > 0.0)) {
        return Err(OtError::NonPositiveMarginal { which });
    }
    let sum: f64 = m.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(OtError::NotNormalized { which, sum });
    }
    Ok(())
}

fn validate(c: &Tensor, cfg: &SinkhornConfig, a: &[f64], b: &[f64]) -> Result<()> {
    if !(cfg.tau > 0.0 && cfg.tau.is_finite()) {
        return Err(OtError::InvalidTemperature(cfg.tau));
    }
    if cfg.max_iters == 0 {
        return Err(OtError::NoIterations);
    }
    if c.shape() != [a.len(), b.len()] {
        return Err(OtError::Shape {
            what: "cost matrix",
            expected: vec![a.len(), b.len()],
            got: c.shape().to_vec(),
        });
    }
    validate_marginal("row", a)?;
    validate_marginal("column", b)
}

/// `T^(h) = T·W_T^h`, `V^(h) = V·W_V^h` for every head.
pub fn project_heads_on<'t>(
    t: Var<'t>,
    v: Var<'t>,
    heads: &[HeadVars<'t>],
) -> Result<Vec<(Var<'t>, Var<'t>)>> {
    heads
        .iter()
        .map(|h| Ok((t.matmul(h.w_t)?, v.matmul(h.w_v)?)))
        .collect()
}

pub fn project_heads(t: &Tensor, v: &Tensor, heads: &[HeadProjection]) -> Result<Vec<(Tensor, Tensor)>> {
    let tape = Tape::new();
    let (tv, vv) = (tape.constant(t.clone()), tape.constant(v.clone()));
    let hv: Vec<HeadVars<'_>> = heads
        .iter()
        .map(|h| HeadVars {
            w_t: tape.constant(h.w_t.clone()),
            w_v: tape.constant(h.w_v.clone()),
            lambda_spatial: tape.constant(Tensor::scalar(h.lambda_spatial)),
        })
        .collect();
    Ok(project_heads_on(tv, vv, &hv)?
        .into_iter()
        .map(|(a, b)| (a.value(), b.value()))
        .collect())
}

/// Cost of one head; `dist` is the constant `N×M` distance matrix.
pub fn build_cost_on<'t>(
    t_h: Var<'t>,
    v_h: Var<'t>,
    dist: Var<'t>,
    lambda_spatial: Var<'t>,
) -> Result<Var<'t>> {
    let d_h = t_h.value_ref().cols();
    if v_h.value_ref().cols() != d_h {
        return Err(OtError::Shape {
            what: "patch projection",
            expected: vec![v_h.value_ref().rows(), d_h],
            got: v_h.shape(),
        });
    }
    let sim = t_h.matmul(v_h.transpose()?)?.scale(-1.0 / (d_h as f64).sqrt());
    Ok(sim.add(dist.mul_scalar(lambda_spatial)?)?)
}

pub fn build_cost(
    t_h: &Tensor,
    v_h: &Tensor,
    positions: &PositionGrid,
    lambda_spatial: f64,
    head_index: usize,
) -> Result<CostMatrix> {
    let tape = Tape::new();
    let c = build_cost_on(
        tape.constant(t_h.clone()),
        tape.constant(v_h.clone()),
        tape.constant(positions.distances()),
        tape.constant(Tensor::scalar(lambda_spatial)),
    )?;
    Ok(CostMatrix {
        values: c.value(),
        head_index,
    })
}

/// Solver statistics of a taped solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornStats {
    pub iterations_used: usize,
    pub marginal_violation: f64,
    /// Column violation after each iteration (rows are exact after each).
    pub history: Vec<f64>,
}

/// Log-domain Sinkhorn recorded on the tape. Returns the plan
/// `π = exp(f ⊕ (−C/τ) ⊕ g)` and solver stats.
///
/// Stops once the column violation is `<= tol` or after `max_iters`
/// row/column sweeps; with `tol = 0` the sweep count is fixed.
pub fn sinkhorn_on<'t>(
    c: Var<'t>,
    cfg: &SinkhornConfig,
    row_marginal: &[f64],
    col_marginal: &[f64],
) -> Result<(Var<'t>, SinkhornStats)> {
    validate(&c.value_ref(), cfg, row_marginal, col_marginal)?;
    let tape = c.tape();
    let (n, m) = (row_marginal.len(), col_marginal.len());
    let log_a = tape.constant(Tensor::matrix(n, 1, row_marginal.iter().map(|x| x.ln()).collect()));
    let log_b = tape.constant(Tensor::matrix(1, m, col_marginal.iter().map(|x| x.ln()).collect()));
    let k = c.scale(-1.0 / cfg.tau);

    let mut f = tape.constant(Tensor::zeros(&[n, 1]));
    let mut g = tape.constant(Tensor::zeros(&[1, m]));
    let mut history = Vec::new();
    let mut iters = 0;
    loop {
        let col = k.logsumexp_cols_shifted(f)?;
        if iters > 0 {
            let viol = {
                let (cv, gv) = (col.value_ref(), g.value_ref());
                column_violation(cv.data(), gv.data(), col_marginal)
            };
            history.push(viol);
            if viol <= cfg.tol || iters == cfg.max_iters {
                break;
            }
        }
        g = log_b.sub(col)?;
        f = log_a.sub(k.logsumexp_rows_shifted(g)?)?;
        iters += 1;
    }
    let plan = k.add_col_vec(f)?.add_row_vec(g)?.exp();
    let marginal_violation = marginal_violation(&plan.value_ref(), row_marginal, col_marginal);
    Ok((
        plan,
        SinkhornStats {
            iterations_used: iters,
            marginal_violation,
            history,
        },
    ))
}

fn column_violation(col_lse: &[f64], g: &[f64], b: &[f64]) -> f64 {
    col_lse
        .iter()
        .zip(g)
        .zip(b)
        .map(|((c, g), b)| ((c + g).exp() - b).abs())
        .fold(0.0, f64::max)
}

/// Plain log-domain Sinkhorn. Same iteration as [`sinkhorn_on`] without a
/// tape; also returns the per-iteration column violation.
pub fn sinkhorn_with_history(
    c: &Tensor,
    cfg: &SinkhornConfig,
    row_marginal: &[f64],
    col_marginal: &[f64],
) -> Result<(TransportPlan, Vec<f64>)> {
    let mut history = Vec::new();
    let plan = solve(c, cfg, row_marginal, col_marginal, Some(&mut history))?;
    Ok((plan, history))
}

pub fn sinkhorn(
    c: &Tensor,
    cfg: &SinkhornConfig,
    row_marginal: &[f64],
    col_marginal: &[f64],
) -> Result<TransportPlan> {
    solve(c, cfg, row_marginal, col_marginal, None)
}

fn solve(
    c: &Tensor,
    cfg: &SinkhornConfig,
    row_marginal: &[f64],
    col_marginal: &[f64],
    mut history: Option<&mut Vec<f64>>,
) -> Result<TransportPlan> {
    validate(c, cfg, row_marginal, col_marginal)?;
    let (n, m) = (row_marginal.len(), col_marginal.len());
    let k: Vec<f64> = c.data().iter().map(|x| -x / cfg.tau).collect();
    let log_a: Vec<f64> = row_marginal.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = col_marginal.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut col = vec![0.0; m];
    let mut scratch = vec![0.0; n.max(m)];
    let mut iters = 0;
    loop {
        for (j, cj) in col.iter_mut().enumerate() {
            for i in 0..n {
                scratch[i] = k[i * m + j] + f[i];
            }
            *cj = logsumexp(&scratch[..n]);
        }
        if iters > 0 {
            let viol = column_violation(&col, &g, col_marginal);
            if let Some(h) = history.as_deref_mut() {
                h.push(viol);
            }
            if viol <= cfg.tol || iters == cfg.max_iters {
                break;
            }
        }
        for j in 0..m {
            g[j] = log_b[j] - col[j];
        }
        for i in 0..n {
            let row = &k[i * m..(i + 1) * m];
            for j in 0..m {
                scratch[j] = row[j] + g[j];
            }
            f[i] = log_a[i] - logsumexp(&scratch[..m]);
        }
        iters += 1;
    }
    let mut pi = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            pi.set(i, j, (f[i] + k[i * m + j] + g[j]).exp());
        }
    }
    let marginal_violation = marginal_violation(&pi, row_marginal, col_marginal);
    Ok(TransportPlan {
        pi,
        row_marginal: row_marginal.to_vec(),
        col_marginal: col_marginal.to_vec(),
        tau: cfg.tau,
        iterations_used: iters,
        marginal_violation,
    })
}

/// Exhaustive minimum over permutation plans `P/n` of `⟨C, P/n⟩`.
pub fn exact_ot_oracle(c: &Tensor) -> Result<(f64, Tensor)> {
    let n = c.rows();
    if c.cols() != n {
        return Err(OtError::Shape {
            what: "oracle cost",
            expected: vec![n, n],
            got: c.shape().to_vec(),
        });
    }
    if n > 8 {
        return Err(OtError::OracleTooLarge(n));
    }
    let mut best = (f64::INFINITY, (0..n).collect::<Vec<_>>());
    for perm in (0..n).permutations(n) {
        let cost: f64 = perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>() / n as f64;
        if cost < best.0 {
            best = (cost, perm);
        }
    }
    let mut plan = Tensor::zeros(&[n, n]);
    for (i, &j) in best.1.iter().enumerate() {
        plan.set(i, j, 1.0 / n as f64);
    }
    Ok((if n == 0 { 0.0 } else { best.0 }, plan))
}

/// `P = (1/H) Σ_h π^(h)`.
pub fn average_heads(plans: &[TransportPlan]) -> Result<TransportPlan> {
    let first = plans.first().ok_or(OtError::NoPlans)?;
    let mut acc = Tensor::zeros(first.pi.shape());
    for p in plans {
        if p.pi.shape() != first.pi.shape() {
            return Err(OtError::Shape {
                what: "head plan",
                expected: first.pi.shape().to_vec(),
                got: p.pi.shape().to_vec(),
            });
        }
        if p.row_marginal != first.row_marginal || p.col_marginal != first.col_marginal {
            return Err(OtError::Shape {
                what: "head plan marginals",
                expected: vec![first.row_marginal.len(), first.col_marginal.len()],
                got: vec![p.row_marginal.len(), p.col_marginal.len()],
            });
        }
        for (a, x) in acc.data_mut().iter_mut().zip(p.pi.data()) {
            *a += x;
        }
    }
    let h = plans.len() as f64;
    acc.data_mut().iter_mut().for_each(|x| *x /= h);
    let marginal_violation = marginal_violation(&acc, &first.row_marginal, &first.col_marginal);
    Ok(TransportPlan {
        pi: acc,
        row_marginal: first.row_marginal.clone(),
        col_marginal: first.col_marginal.clone(),
        tau: first.tau,
        iterations_used: plans.iter().map(|p| p.iterations_used).max().unwrap_or(0),
        marginal_violation,
    })
}

pub fn average_heads_on<'t>(plans: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = plans.split_first().ok_or(OtError::NoPlans)?;
    let mut acc = *first;
    for p in rest {
        acc = acc.add(*p)?;
    }
    Ok(acc.scale(1.0 / plans.len() as f64))
}

/// Rows rescaled to sum to one.
pub fn row_normalize_on(p: Var<'_>) -> Result<Var<'_>> {
    Ok(p.mul_col_vec(p.sum_rows()?.recip())?)
}

/// Entropy of each row-normalized row, `N×1`.
pub fn row_entropy_on(p: Var<'_>) -> Result<Var<'_>> {
    let q = row_normalize_on(p)?;
    // clamp keeps 0·log 0 at 0 when an entry underflows
    let log_q = q.clamp(1e-300, 1.0).log();
    Ok(q.mul(log_q)?.sum_rows()?.scale(-1.0))
}

/// `conf_i = −Σ_j p̂_ij log p̂_ij` on the row-normalized plan; an all-zero
/// row is maximally uncertain, `log M`.
pub fn row_entropy_confidence(plan: &TransportPlan) -> Vec<f64> {
    entropy_rows(&plan.pi)
}

pub(crate) fn entropy_rows(p: &Tensor) -> Vec<f64> {
    let m = p.cols();
    (0..p.rows())
        .map(|i| {
            let row = p.row(i);
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return (m as f64).ln();
            }
            -row
                .iter()
                .map(|x| x / s)
                .filter(|q| *q > 0.0)
                .map(|q| q * q.ln())
                .sum::<f64>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_projection_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = rand_matrix(&mut rng, 3, 4);
        let v = rand_matrix(&mut rng, 5, 4);
        let head = HeadProjection {
            w_t: Tensor::identity(4),
            w_v: Tensor::identity(4),
            lambda_spatial: 0.1,
        };
        let out = project_heads(&t, &v, &[head]).unwrap();
        assert_eq!(out[0].0, t);
        assert_eq!(out[0].1, v);
    }

    #[test]
    fn zero_features_project_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = HeadProjection {
            w_t: rand_matrix(&mut rng, 8, 4),
            w_v: rand_matrix(&mut rng, 8, 4),
            lambda_spatial: 0.1,
        };
        let out = project_heads(&Tensor::zeros(&[3, 8]), &Tensor::zeros(&[2, 8]), &[head]).unwrap();
        assert!(out[0].0.data().iter().chain(out[0].1.data()).all(|x| *x == 0.0));
    }

    #[test]
    fn projection_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = rand_matrix(&mut rng, 4, 8);
        let v = rand_matrix(&mut rng, 6, 8);
        let head = HeadProjection {
            w_t: rand_matrix(&mut rng, 8, 4),
            w_v: rand_matrix(&mut rng, 8, 4),
            lambda_spatial: 0.1,
        };
        let out = project_heads(&t, &v, std::slice::from_ref(&head)).unwrap();
        assert!(out[0].0.max_abs_diff(&naive_matmul(&t, &head.w_t)) < 1e-14);
        assert!(out[0].1.max_abs_diff(&naive_matmul(&v, &head.w_v)) < 1e-14);
    }

    #[test]
    fn projection_dimension_mismatch_rejected() {
        let head = HeadProjection {
            w_t: Tensor::zeros(&[6, 2]),
            w_v: Tensor::zeros(&[6, 2]),
            lambda_spatial: 0.1,
        };
        assert!(project_heads(&Tensor::zeros(&[3, 8]), &Tensor::zeros(&[2, 8]), &[head]).is_err());
    }

    #[test]
    fn cost_examples() {
        let pos = PositionGrid::new(vec![[0.5, 0.5]], vec![[0.5, 0.5]]).unwrap();
        let c = build_cost(&Tensor::zeros(&[1, 4]), &Tensor::zeros(&[1, 4]), &pos, 1.0, 0).unwrap();
        assert_eq!(c.values.data(), &[0.0]);

        let e1 = Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0]);
        let c = build_cost(&e1, &e1, &pos, 0.0, 0).unwrap();
        assert_eq!(c.values.data(), &[-0.5]);

        let pos = PositionGrid::new(vec![[0.0, 0.0]], vec![[1.0, 1.0]]).unwrap();
        let c = build_cost(&Tensor::zeros(&[1, 4]), &Tensor::zeros(&[1, 4]), &pos, 2.0, 0).unwrap();
        assert!((c.values.data()[0] - 2.0 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn positions_outside_unit_square_rejected() {
        assert!(PositionGrid::new(vec![[1.2, 0.0]], vec![]).is_err());
    }

    #[test]
    fn cost_translation_covariance() {
        // shifting both sides by c adds  −(t_i·c + c·v_j + c·c)/√d_h
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, v) = (rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 5, 4));
        let shift: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let add = |x: &Tensor| {
            let mut y = x.clone();
            for r in 0..y.rows() {
                for k in 0..4 {
                    y.set(r, k, y.get(r, k) + shift[k]);
                }
            }
            y
        };
        let pos = PositionGrid::new(vec![[0.1, 0.2]; 3], vec![[0.7, 0.4]; 5]).unwrap();
        let base = build_cost(&t, &v, &pos, 0.3, 0).unwrap().values;
        let moved = build_cost(&add(&t), &add(&v), &pos, 0.3, 0).unwrap().values;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for i in 0..3 {
            for j in 0..5 {
                let expected = -(dot(t.row(i), &shift) + dot(&shift, v.row(j)) + dot(&shift, &shift)) / 2.0;
                assert!((moved.get(i, j) - base.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sinkhorn_zero_cost_is_uniform() {
        let plan = sinkhorn(&Tensor::zeros(&[2, 2]), &SinkhornConfig::default(), &uniform(2), &uniform(2)).unwrap();
        for x in plan.pi.data() {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn sinkhorn_small_tau_recovers_assignment() {
        let c = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let cfg = SinkhornConfig {
            tau: 0.01,
            ..Default::default()
        };
        let plan = sinkhorn(&c, &cfg, &uniform(2), &uniform(2)).unwrap();
        let (_, oracle) = exact_ot_oracle(&c).unwrap();
        assert!(plan.pi.max_abs_diff(&oracle) < 1e-6, "{:?}", plan.pi);
    }

    #[test]
    fn sinkhorn_rejects_bad_inputs() {
        let c = Tensor::zeros(&[2, 2]);
        let bad_tau = SinkhornConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            sinkhorn(&c, &bad_tau, &uniform(2), &uniform(2)),
            Err(OtError::InvalidTemperature(_))
        ));
        assert!(matches!(
            sinkhorn(&c, &SinkhornConfig::default(), &[0.5, 0.6], &uniform(2)),
            Err(OtError::NotNormalized { .. })
        ));
    }

    #[test]
    fn taped_and_plain_solvers_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = rand_matrix(&mut rng, 5, 7);
        let cfg = SinkhornConfig::default();
        let plain = sinkhorn(&c, &cfg, &uniform(5), &uniform(7)).unwrap();
        let tape = Tape::new();
        let (taped, stats) = sinkhorn_on(tape.constant(c), &cfg, &uniform(5), &uniform(7)).unwrap();
        assert_eq!(stats.iterations_used, plain.iterations_used);
        assert!(taped.value().max_abs_diff(&plain.pi) < 1e-15);
        assert!(stats.marginal_violation <= cfg.tol);
    }

    #[test]
    fn violation_non_increasing_on_fixtures() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (n, m) = (rng.gen_range(2..8), rng.gen_range(2..8));
            let c = rand_matrix(&mut rng, n, m);
            let cfg = SinkhornConfig {
                max_iters: 1_000_000,
                ..Default::default()
            };
            let (plan, history) = sinkhorn_with_history(&c, &cfg, &uniform(n), &uniform(m)).unwrap();
            for w in history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-15, "seed {seed}: {history:?}");
            }
            assert!(plan.marginal_violation <= 1e-6);
        }
    }

    #[test]
    fn oracle_examples() {
        let (cost, plan) = exact_ot_oracle(&Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(plan.data(), &[0.5, 0.0, 0.0, 0.5]);
        let (cost, _) = exact_ot_oracle(&Tensor::filled(&[4, 4], 3.0)).unwrap();
        assert!((cost - 3.0).abs() < 1e-15);
        assert!(matches!(exact_ot_oracle(&Tensor::zeros(&[9, 9])), Err(OtError::OracleTooLarge(9))));
    }

    #[test]
    fn small_tau_cost_near_oracle_on_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = rand_matrix(&mut rng, 5, 5).map(|x| x.abs() + 0.5);
        let (opt, _) = exact_ot_oracle(&c).unwrap();
        let cfg = SinkhornConfig {
            tau: 0.005,
            max_iters: 20_000,
            tol: 1e-9,
        };
        let plan = sinkhorn(&c, &cfg, &uniform(5), &uniform(5)).unwrap();
        assert!((plan.cost(&c) - opt).abs() <= 0.01 * opt.abs(), "{} vs {opt}", plan.cost(&c));
    }

    #[test]
    fn cost_gap_shrinks_with_tau() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let n = rng.gen_range(2..=6);
            let c = rand_matrix(&mut rng, n, n).map(|x| x + 1.5);
            let (opt, _) = exact_ot_oracle(&c).unwrap();
            let mut last = f64::INFINITY;
            for tau in [1.0, 0.1, 0.01, 0.005] {
                let cfg = SinkhornConfig {
                    tau,
                    max_iters: 1_000_000,
                    tol: 1e-8,
                };
                let gap = sinkhorn(&c, &cfg, &uniform(n), &uniform(n)).unwrap().cost(&c) - opt;
                // the plan may miss the marginals by up to tol, so the gap can dip
                // slightly below zero
                assert!(gap >= -1e-6 && gap <= last + 1e-6, "seed {seed} tau {tau}: {gap} after {last}");
                last = gap;
            }
            assert!(last < 0.01 * opt, "seed {seed}: final gap {last}");
        }
    }

    #[test]
    fn average_heads_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = SinkhornConfig::default();
        let a = sinkhorn(&rand_matrix(&mut rng, 3, 4), &cfg, &uniform(3), &uniform(4)).unwrap();
        let b = sinkhorn(&rand_matrix(&mut rng, 3, 4), &cfg, &uniform(3), &uniform(4)).unwrap();
        let single = average_heads(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.pi, a.pi);
        let avg = average_heads(&[a.clone(), b.clone()]).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((avg.pi.get(i, j) - (a.pi.get(i, j) + b.pi.get(i, j)) / 2.0).abs() < 1e-16);
            }
        }
        assert!(avg.marginal_violation <= 1e-6);
        let c = sinkhorn(&rand_matrix(&mut rng, 2, 4), &cfg, &uniform(2), &uniform(4)).unwrap();
        assert!(average_heads(&[a, c]).is_err());
        assert!(matches!(average_heads(&[]), Err(OtError::NoPlans)));
    }

    #[test]
    fn entropy_examples() {
        let plan = |rows: Vec<Vec<f64>>| TransportPlan {
            pi: Tensor::from_rows(&rows),
            row_marginal: vec![],
            col_marginal: vec![],
            tau: 0.1,
            iterations_used: 0,
            marginal_violation: 0.0,
        };
        let conf = row_entropy_confidence(&plan(vec![
            vec![0.25; 4],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0; 4],
        ]));
        assert!((conf[0] - 4f64.ln()).abs() < 1e-15);
        assert_eq!(conf[1], 0.0);
        assert_eq!(conf[2], 4f64.ln());
        let conf = row_entropy_confidence(&plan(vec![vec![0.5, 0.25, 0.25]]));
        assert!((conf[0] - 1.5 * 2f64.ln()).abs() < 1e-15);
        // unnormalized rows are renormalized first
        let conf = row_entropy_confidence(&plan(vec![vec![0.05, 0.025, 0.025]]));
        assert!((conf[0] - 1.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn taped_entropy_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = rand_matrix(&mut rng, 4, 6).map(|x| x.abs() * 0.1);
        let tape = Tape::new();
        let e = row_entropy_on(tape.constant(p.clone())).unwrap().value();
        for (a, b) in e.data().iter().zip(entropy_rows(&p)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn plan_json_dump_fields() {
        let plan = sinkhorn(&Tensor::zeros(&[2, 3]), &SinkhornConfig::default(), &uniform(2), &uniform(3)).unwrap();
        let j = plan.to_json();
        assert_eq!(j["shape"], serde_json::json!([2, 3]));
        assert_eq!(j["values"].as_array().unwrap().len(), 6);
        assert!(j["tau"].is_number() && j["iterations_used"].is_number() && j["marginal_violation"].is_number());
    }

    proptest! {
        #[test]
        fn sinkhorn_plans_are_feasible(
            n in 1usize..7,
            m in 1usize..7,
            seed in 0u64..1000,
            tau in 0.05f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rand_matrix(&mut rng, n, m);
            let cfg = SinkhornConfig { tau, max_iters: 1_000_000, tol: 1e-8 };
            let plan = sinkhorn(&c, &cfg, &uniform(n), &uniform(m)).unwrap();
            prop_assert!(plan.pi.data().iter().all(|x| *x >= 0.0));
            prop_assert!(plan.marginal_violation <= 1e-8);
            prop_assert!((plan.pi.data().iter().sum::<f64>() - 1.0).abs() < 1e-7);
        }

        #[test]
        fn entropy_bounded_and_column_permutation_invariant(
            row in proptest::collection::vec(0.0f64..1.0, 2..10),
            rot in 0usize..10,
        ) {
            let m = row.len();
            let p = Tensor::matrix(1, m, row.clone());
            let mut shifted = row.clone();
            shifted.rotate_left(rot % m);
            let e = entropy_rows(&p)[0];
            let e2 = entropy_rows(&Tensor::matrix(1, m, shifted))[0];
            prop_assert!(e >= -1e-15 && e <= (m as f64).ln() + 1e-12);
            prop_assert!((e - e2).abs() < 1e-12);
        }
    }
}
