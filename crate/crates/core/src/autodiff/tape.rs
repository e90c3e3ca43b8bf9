//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every primitive call appends one node holding its output value and the ids
//! of its parents. Parents always precede children, so walking node ids in
//! descending order is a reverse topological order and `backward` visits each
//! node once.
//!
//! Leaf gradients are accumulated across `backward` calls until
//! [`Tape::zero_grad`] is called.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use super::tensor::{logsumexp, matmul_raw, sigmoid};
use super::{AutodiffError, Tensor};

/// Primitive operation kinds recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRowVec,
    AddColVec,
    MulColVec,
    MulScalar,
    Scale,
    AddScalar,
    Exp,
    Log,
    Recip,
    Sigmoid,
    SoftmaxRows,
    LogSumExpRows,
    LogSumExpCols,
    LogSumExpRowsShifted,
    LogSumExpColsShifted,
    Sum,
    Mean,
    SumRows,
    SumCols,
    ConcatCols,
    SliceRows,
    SliceCols,
    Clamp,
    Transpose,
}

impl OpKind {
    /// Every differentiable primitive (everything except `Leaf`).
    pub const PRIMITIVES: [OpKind; 28] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRowVec,
        OpKind::AddColVec,
        OpKind::MulColVec,
        OpKind::MulScalar,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Recip,
        OpKind::Sigmoid,
        OpKind::SoftmaxRows,
        OpKind::LogSumExpRows,
        OpKind::LogSumExpCols,
        OpKind::LogSumExpRowsShifted,
        OpKind::LogSumExpColsShifted,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumRows,
        OpKind::SumCols,
        OpKind::ConcatCols,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::Clamp,
        OpKind::Transpose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRowVec => "add_row_vec",
            OpKind::AddColVec => "add_col_vec",
            OpKind::MulColVec => "mul_col_vec",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Recip => "recip",
            OpKind::Sigmoid => "sigmoid",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSumExpRows => "logsumexp_rows",
            OpKind::LogSumExpCols => "logsumexp_cols",
            OpKind::LogSumExpRowsShifted => "logsumexp_rows_shifted",
            OpKind::LogSumExpColsShifted => "logsumexp_cols_shifted",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumRows => "sum_rows",
            OpKind::SumCols => "sum_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::Clamp => "clamp",
            OpKind::Transpose => "transpose",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::PRIMITIVES.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowVec(usize, usize),
    AddColVec(usize, usize),
    MulColVec(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    LogSumExpCols(usize),
    /// Keeps the softmax weights so backward needs no exponentials.
    LogSumExpRowsShifted(usize, usize, Vec<f64>),
    LogSumExpColsShifted(usize, usize, Vec<f64>),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Clamp(usize, f64, f64),
    Transpose(usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRowVec(..) => OpKind::AddRowVec,
            Op::AddColVec(..) => OpKind::AddColVec,
            Op::MulColVec(..) => OpKind::MulColVec,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Recip(..) => OpKind::Recip,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LogSumExpRows(..) => OpKind::LogSumExpRows,
            Op::LogSumExpCols(..) => OpKind::LogSumExpCols,
            Op::LogSumExpRowsShifted(..) => OpKind::LogSumExpRowsShifted,
            Op::LogSumExpColsShifted(..) => OpKind::LogSumExpColsShifted,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumRows(..) => OpKind::SumRows,
            Op::SumCols(..) => OpKind::SumCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Transpose(..) => OpKind::Transpose,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
///
/// A tape is single-threaded; build one tape per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<BTreeMap<usize, Vec<f64>>>,
    fault: Option<OpKind>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

type Result<T> = std::result::Result<T, AutodiffError>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward pass negates the local derivative of `kind`.
    ///
    /// Only meant for mutation-testing gradient checks.
    #[doc(hidden)]
    pub fn with_injected_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::default()
        }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Accumulated gradient of a trainable leaf, if `backward` reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let shape = nodes[var.id].value.shape().to_vec();
        self.grads
            .borrow()
            .get(&var.id)
            .map(|g| Tensor::new(shape, g.clone()).expect("gradient shape"))
    }

    /// Gradient of a trainable leaf, zeros if it was never reached.
    pub fn grad_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.grad(var)
            .unwrap_or_else(|| Tensor::zeros(self.nodes.borrow()[var.id].value.shape()))
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, op: Op, value: Tensor, parents: &[usize]) -> Var<'_> {
        let rg = self.requires(parents);
        self.push(op, value, rg)
    }

    /// Back-propagates from a scalar `loss`, adding `∂loss/∂leaf` into the
    /// gradient accumulator of every trainable leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape();
        if nodes[loss.id].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);
        let mut grads = self.grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(mut g) = adj[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if Some(node.op.kind()) == self.fault {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            let y = node.value.data();
            let mut acc = |pid: usize, f: &mut dyn FnMut(&mut [f64], &[f64])| {
                let parent = &nodes[pid];
                if !parent.requires_grad {
                    return;
                }
                let slot = adj[pid].get_or_insert_with(|| vec![0.0; parent.value.len()]);
                f(slot, parent.value.data());
            };
            match &node.op {
                Op::Leaf => {
                    let slot = grads.entry(id).or_insert_with(|| vec![0.0; g.len()]);
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                    let m = nodes[*b].value.cols();
                    let bv = nodes[*b].value.data();
                    let av = nodes[*a].value.data();
                    acc(*a, &mut |da, _| {
                        for i in 0..n {
                            let g_row = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let b_row = &bv[p * m..(p + 1) * m];
                                da[i * k + p] +=
                                    g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    acc(*b, &mut |db, _| {
                        for i in 0..n {
                            let g_row = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let a_ip = av[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * m..(p + 1) * m].iter_mut().zip(g_row) {
                                    *d += a_ip * gv;
                                }
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |da, _| add_into(da, &g));
                    acc(*b, &mut |db, _| add_into(db, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |da, _| add_into(da, &g));
                    acc(*b, &mut |db, _| {
                        for (d, v) in db.iter_mut().zip(&g) {
                            *d -= v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let bv = nodes[*b].value.data();
                    let av = nodes[*a].value.data();
                    acc(*a, &mut |da, _| {
                        for ((d, gv), x) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gv * x;
                        }
                    });
                    acc(*b, &mut |db, _| {
                        for ((d, gv), x) in db.iter_mut().zip(&g).zip(av) {
                            *d += gv * x;
                        }
                    });
                }
                Op::AddRowVec(a, r) => {
                    let m = node.value.cols();
                    acc(*a, &mut |da, _| add_into(da, &g));
                    acc(*r, &mut |dr, _| {
                        for row in g.chunks(m) {
                            add_into(dr, row);
                        }
                    });
                }
                Op::AddColVec(a, c) => {
                    let m = node.value.cols();
                    acc(*a, &mut |da, _| add_into(da, &g));
                    acc(*c, &mut |dc, _| {
                        for (d, row) in dc.iter_mut().zip(g.chunks(m)) {
                            *d += row.iter().sum::<f64>();
                        }
                    });
                }
                Op::MulColVec(a, c) => {
                    let m = node.value.cols();
                    let cv = nodes[*c].value.data();
                    let av = nodes[*a].value.data();
                    acc(*a, &mut |da, _| {
                        for (i, (drow, grow)) in da.chunks_mut(m).zip(g.chunks(m)).enumerate() {
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += gv * cv[i];
                            }
                        }
                    });
                    acc(*c, &mut |dc, _| {
                        for (i, d) in dc.iter_mut().enumerate() {
                            *d += g[i * m..(i + 1) * m]
                                .iter()
                                .zip(&av[i * m..(i + 1) * m])
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    });
                }
                Op::MulScalar(a, s) => {
                    let sv = nodes[*s].value.data()[0];
                    let av = nodes[*a].value.data();
                    acc(*a, &mut |da, _| {
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += gv * sv;
                        }
                    });
                    acc(*s, &mut |ds, _| {
                        ds[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                    });
                }
                Op::Scale(a, k) => acc(*a, &mut |da, _| {
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += k * gv;
                    }
                }),
                Op::AddScalar(a) => acc(*a, &mut |da, _| add_into(da, &g)),
                Op::Exp(a) => acc(*a, &mut |da, _| {
                    for ((d, gv), yv) in da.iter_mut().zip(&g).zip(y) {
                        *d += gv * yv;
                    }
                }),
                Op::Log(a) => acc(*a, &mut |da, x| {
                    for ((d, gv), xv) in da.iter_mut().zip(&g).zip(x) {
                        *d += gv / xv;
                    }
                }),
                Op::Recip(a) => acc(*a, &mut |da, _| {
                    for ((d, gv), yv) in da.iter_mut().zip(&g).zip(y) {
                        *d -= gv * yv * yv;
                    }
                }),
                Op::Sigmoid(a) => acc(*a, &mut |da, _| {
                    for ((d, gv), yv) in da.iter_mut().zip(&g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }),
                Op::SoftmaxRows(a) => {
                    let m = node.value.cols();
                    acc(*a, &mut |da, _| {
                        for ((drow, grow), yrow) in
                            da.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::LogSumExpRows(a) => {
                    let m = nodes[*a].value.cols();
                    acc(*a, &mut |da, x| {
                        for (i, (drow, xrow)) in da.chunks_mut(m).zip(x.chunks(m)).enumerate() {
                            for (d, xv) in drow.iter_mut().zip(xrow) {
                                *d += g[i] * (xv - y[i]).exp();
                            }
                        }
                    });
                }
                Op::LogSumExpCols(a) => {
                    let m = nodes[*a].value.cols();
                    acc(*a, &mut |da, x| {
                        for (drow, xrow) in da.chunks_mut(m).zip(x.chunks(m)) {
                            for (j, (d, xv)) in drow.iter_mut().zip(xrow).enumerate() {
                                *d += g[j] * (xv - y[j]).exp();
                            }
                        }
                    });
                }
                Op::LogSumExpRowsShifted(a, r, w) => {
                    let m = nodes[*r].value.len();
                    acc(*a, &mut |da, _| {
                        for ((drow, wrow), gi) in da.chunks_mut(m).zip(w.chunks(m)).zip(&g) {
                            for (d, wv) in drow.iter_mut().zip(wrow) {
                                *d += gi * wv;
                            }
                        }
                    });
                    acc(*r, &mut |dr, _| {
                        for (wrow, gi) in w.chunks(m).zip(&g) {
                            for (d, wv) in dr.iter_mut().zip(wrow) {
                                *d += gi * wv;
                            }
                        }
                    });
                }
                Op::LogSumExpColsShifted(a, c, w) => {
                    let m = g.len();
                    acc(*a, &mut |da, _| {
                        for (drow, wrow) in da.chunks_mut(m).zip(w.chunks(m)) {
                            for ((d, wv), gj) in drow.iter_mut().zip(wrow).zip(&g) {
                                *d += gj * wv;
                            }
                        }
                    });
                    acc(*c, &mut |dc, _| {
                        for (d, wrow) in dc.iter_mut().zip(w.chunks(m)) {
                            *d += wrow.iter().zip(&g).map(|(wv, gj)| wv * gj).sum::<f64>();
                        }
                    });
                }
                Op::Sum(a) => acc(*a, &mut |da, _| da.iter_mut().for_each(|d| *d += g[0])),
                Op::Mean(a) => acc(*a, &mut |da, _| {
                    let n = da.len() as f64;
                    da.iter_mut().for_each(|d| *d += g[0] / n);
                }),
                Op::SumRows(a) => {
                    let m = nodes[*a].value.cols();
                    acc(*a, &mut |da, _| {
                        for (drow, gv) in da.chunks_mut(m).zip(&g) {
                            drow.iter_mut().for_each(|d| *d += gv);
                        }
                    });
                }
                Op::SumCols(a) => {
                    let m = nodes[*a].value.cols();
                    acc(*a, &mut |da, _| {
                        for drow in da.chunks_mut(m) {
                            add_into(drow, &g);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        acc(p, &mut |dp, _| {
                            for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(total)) {
                                add_into(drow, &grow[offset..offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    let m = node.value.cols();
                    acc(*a, &mut |da, _| {
                        add_into(&mut da[start * m..start * m + g.len()], &g);
                    });
                }
                Op::SliceCols(a, start) => {
                    let w = node.value.cols();
                    let m = nodes[*a].value.cols();
                    acc(*a, &mut |da, _| {
                        for (drow, grow) in da.chunks_mut(m).zip(g.chunks(w)) {
                            add_into(&mut drow[*start..start + w], grow);
                        }
                    });
                }
                Op::Clamp(a, lo, hi) => acc(*a, &mut |da, x| {
                    for ((d, gv), xv) in da.iter_mut().zip(&g).zip(x) {
                        if *xv >= *lo && *xv <= *hi {
                            *d += gv;
                        }
                    }
                }),
                Op::Transpose(a) => {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    acc(*a, &mut |da, _| {
                        // da is c×r
                        for i in 0..r {
                            for j in 0..c {
                                da[j * r + i] += g[i * c + j];
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Overwrites `xs` with its softmax and returns its log-sum-exp. A row of
/// `-inf` becomes all zeros with result `-inf`.
fn softmax_in_place(xs: &mut [f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        let out = if xs.is_empty() { f64::NEG_INFINITY } else { mx };
        xs.iter_mut().for_each(|x| *x = 0.0);
        return out;
    }
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    xs.iter_mut().for_each(|x| *x /= s);
    mx + s.ln()
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(AutodiffError::NotMatrix {
            op,
            shape: t.shape().to_vec(),
        })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the node's value. Do not hold across op calls on the same tape.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn item(self) -> f64 {
        self.value_ref().item()
    }

    pub fn shape(self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(self) -> Option<Tensor> {
        self.tape.grad(self)
    }

    fn same_tape(self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let out = f(&self.value_ref());
        self.tape.record(op, out, &[self.id])
    }

    fn zip_same(
        self,
        other: Var<'t>,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = {
            let a = self.value_ref();
            let b = other.value_ref();
            if a.shape() != b.shape() {
                return Err(mismatch(name, &a, &b));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.record(op, out, &[self.id, other.id]))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = {
            let a = self.value_ref();
            let b = other.value_ref();
            require_matrix("matmul", &a)?;
            require_matrix("matmul", &b)?;
            if a.cols() != b.rows() {
                return Err(mismatch("matmul", &a, &b));
            }
            let (n, k, m) = (a.rows(), a.cols(), b.cols());
            Tensor::matrix(n, m, matmul_raw(a.data(), b.data(), n, k, m))
        };
        Ok(self.tape.record(Op::MatMul(self.id, other.id), out, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    /// `self (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row_vec(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row)?;
        let out = {
            let a = self.value_ref();
            let r = row.value_ref();
            require_matrix("add_row_vec", &a)?;
            if r.shape() != [1, a.cols()] {
                return Err(mismatch("add_row_vec", &a, &r));
            }
            let m = a.cols();
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(m.max(1)) {
                add_into(chunk, r.data());
            }
            Tensor::matrix(a.rows(), m, data)
        };
        Ok(self.tape.record(Op::AddRowVec(self.id, row.id), out, &[self.id, row.id]))
    }

    /// `self (n×m) + col (n×1)` broadcast over columns.
    pub fn add_col_vec(self, col: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(col)?;
        let out = {
            let a = self.value_ref();
            let c = col.value_ref();
            require_matrix("add_col_vec", &a)?;
            if c.shape() != [a.rows(), 1] {
                return Err(mismatch("add_col_vec", &a, &c));
            }
            let m = a.cols();
            let mut data = a.data().to_vec();
            for (chunk, cv) in data.chunks_mut(m.max(1)).zip(c.data()) {
                chunk.iter_mut().for_each(|x| *x += cv);
            }
            Tensor::matrix(a.rows(), m, data)
        };
        Ok(self.tape.record(Op::AddColVec(self.id, col.id), out, &[self.id, col.id]))
    }

    /// `self (n×m) ⊙ col (n×1)`: scales row `i` by `col[i]`.
    pub fn mul_col_vec(self, col: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(col)?;
        let out = {
            let a = self.value_ref();
            let c = col.value_ref();
            require_matrix("mul_col_vec", &a)?;
            if c.shape() != [a.rows(), 1] {
                return Err(mismatch("mul_col_vec", &a, &c));
            }
            let m = a.cols();
            let mut data = a.data().to_vec();
            for (chunk, cv) in data.chunks_mut(m.max(1)).zip(c.data()) {
                chunk.iter_mut().for_each(|x| *x *= cv);
            }
            Tensor::matrix(a.rows(), m, data)
        };
        Ok(self.tape.record(Op::MulColVec(self.id, col.id), out, &[self.id, col.id]))
    }

    /// Multiplies every entry by a one-element variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(s)?;
        let out = {
            let sv = s.value_ref();
            if sv.len() != 1 {
                return Err(mismatch("mul_scalar", &self.value_ref(), &sv));
            }
            let k = sv.data()[0];
            self.value_ref().map(|x| x * k)
        };
        Ok(self.tape.record(Op::MulScalar(self.id, s.id), out, &[self.id, s.id]))
    }

    /// Multiplies by a constant.
    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |a| a.map(|x| x * k))
    }

    /// Adds a constant.
    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| a.map(|x| x + k))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Op::Recip(self.id), |a| a.map(|x| 1.0 / x))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    /// Max-shifted softmax over each row of a matrix.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        require_matrix("softmax_rows", &self.value_ref())?;
        Ok(self.unary(Op::SoftmaxRows(self.id), |a| {
            let m = a.cols();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(m.max(1)) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x /= s);
            }
            Tensor::matrix(a.rows(), m, data)
        }))
    }

    /// `n×m → n×1`, log-sum-exp of each row.
    pub fn logsumexp_rows(self) -> Result<Var<'t>> {
        require_matrix("logsumexp_rows", &self.value_ref())?;
        Ok(self.unary(Op::LogSumExpRows(self.id), |a| {
            let m = a.cols();
            let data = a.data().chunks(m.max(1)).map(logsumexp).collect();
            Tensor::matrix(a.rows(), 1, data)
        }))
    }

    /// `log Σ_j exp(self_ij + row_j)`: `n×m`, `1×m` → `n×1`. Same as
    /// `self.add_row_vec(row)?.logsumexp_rows()` without the intermediate.
    pub fn logsumexp_rows_shifted(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row)?;
        let (out, w) = {
            let a = self.value_ref();
            let r = row.value_ref();
            require_matrix("logsumexp_rows_shifted", &a)?;
            if r.shape() != [1, a.cols()] {
                return Err(mismatch("logsumexp_rows_shifted", &a, &r));
            }
            let m = a.cols();
            let mut w = vec![0.0; a.len()];
            let mut out = Vec::with_capacity(a.rows());
            for (wrow, arow) in w.chunks_mut(m.max(1)).zip(a.data().chunks(m.max(1))) {
                for ((wv, x), rj) in wrow.iter_mut().zip(arow).zip(r.data()) {
                    *wv = x + rj;
                }
                out.push(softmax_in_place(wrow));
            }
            (Tensor::matrix(a.rows(), 1, out), w)
        };
        Ok(self
            .tape
            .record(Op::LogSumExpRowsShifted(self.id, row.id, w), out, &[self.id, row.id]))
    }

    /// `log Σ_i exp(self_ij + col_i)`: `n×m`, `n×1` → `1×m`.
    pub fn logsumexp_cols_shifted(self, col: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(col)?;
        let (out, w) = {
            let a = self.value_ref();
            let c = col.value_ref();
            require_matrix("logsumexp_cols_shifted", &a)?;
            if c.shape() != [a.rows(), 1] {
                return Err(mismatch("logsumexp_cols_shifted", &a, &c));
            }
            let m = a.cols();
            let mut w: Vec<f64> = a.data().to_vec();
            let mut mx = vec![f64::NEG_INFINITY; m];
            for (wrow, ci) in w.chunks_mut(m.max(1)).zip(c.data()) {
                for (x, v) in mx.iter_mut().zip(wrow.iter_mut()) {
                    *v += ci;
                    *x = x.max(*v);
                }
            }
            let mut s = vec![0.0; m];
            for wrow in w.chunks_mut(m.max(1)) {
                for j in 0..m {
                    wrow[j] = if mx[j].is_finite() { (wrow[j] - mx[j]).exp() } else { 0.0 };
                    s[j] += wrow[j];
                }
            }
            for wrow in w.chunks_mut(m.max(1)) {
                for j in 0..m {
                    if s[j] > 0.0 {
                        wrow[j] /= s[j];
                    }
                }
            }
            let out = (0..m)
                .map(|j| if mx[j].is_finite() { mx[j] + s[j].ln() } else { mx[j] })
                .collect();
            (Tensor::matrix(1, m, out), w)
        };
        Ok(self
            .tape
            .record(Op::LogSumExpColsShifted(self.id, col.id, w), out, &[self.id, col.id]))
    }

    /// `n×m → 1×m`, log-sum-exp of each column.
    pub fn logsumexp_cols(self) -> Result<Var<'t>> {
        require_matrix("logsumexp_cols", &self.value_ref())?;
        Ok(self.unary(Op::LogSumExpCols(self.id), |a| {
            let (n, m) = (a.rows(), a.cols());
            let mut mx = vec![f64::NEG_INFINITY; m];
            for row in a.data().chunks(m.max(1)) {
                for (x, v) in mx.iter_mut().zip(row) {
                    *x = x.max(*v);
                }
            }
            let mut s = vec![0.0; m];
            for row in a.data().chunks(m.max(1)) {
                for j in 0..m {
                    if mx[j] != f64::NEG_INFINITY {
                        s[j] += (row[j] - mx[j]).exp();
                    }
                }
            }
            let data = (0..m)
                .map(|j| {
                    if mx[j] == f64::NEG_INFINITY || n == 0 {
                        f64::NEG_INFINITY
                    } else {
                        mx[j] + s[j].ln()
                    }
                })
                .collect();
            Tensor::matrix(1, m, data)
        }))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.data().iter().sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |a| {
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        })
    }

    /// `n×m → n×1`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        require_matrix("sum_rows", &self.value_ref())?;
        Ok(self.unary(Op::SumRows(self.id), |a| {
            let m = a.cols();
            let data = a.data().chunks(m.max(1)).map(|r| r.iter().sum()).collect();
            Tensor::matrix(a.rows(), 1, data)
        }))
    }

    /// `n×m → 1×m`.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        require_matrix("sum_cols", &self.value_ref())?;
        Ok(self.unary(Op::SumCols(self.id), |a| {
            let m = a.cols();
            let mut data = vec![0.0; m];
            for row in a.data().chunks(m.max(1)) {
                add_into(&mut data, row);
            }
            Tensor::matrix(1, m, data)
        }))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value_ref();
            require_matrix("slice_rows", &a)?;
            if start + len > a.rows() {
                return Err(AutodiffError::InvalidArgument {
                    op: "slice_rows",
                    msg: format!("rows {start}..{} out of bounds for {:?}", start + len, a.shape()),
                });
            }
            let m = a.cols();
            Tensor::matrix(len, m, a.data()[start * m..(start + len) * m].to_vec())
        };
        Ok(self.tape.record(Op::SliceRows(self.id, start), out, &[self.id]))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value_ref();
            require_matrix("slice_cols", &a)?;
            if start + len > a.cols() {
                return Err(AutodiffError::InvalidArgument {
                    op: "slice_cols",
                    msg: format!("cols {start}..{} out of bounds for {:?}", start + len, a.shape()),
                });
            }
            let m = a.cols();
            let mut data = Vec::with_capacity(a.rows() * len);
            for row in a.data().chunks(m.max(1)) {
                data.extend_from_slice(&row[start..start + len]);
            }
            Tensor::matrix(a.rows(), len, data)
        };
        Ok(self.tape.record(Op::SliceCols(self.id, start), out, &[self.id]))
    }

    /// Entries limited to `[lo, hi]`; gradient passes inside the closed interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |a| a.map(|x| x.clamp(lo, hi)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        require_matrix("transpose", &self.value_ref())?;
        Ok(self.unary(Op::Transpose(self.id), Tensor::transpose))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        for p in parts {
            first.same_tape(*p)?;
        }
        let out = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value_ref()).collect();
            let rows = vals[0].rows();
            for v in &vals {
                require_matrix("concat_cols", v)?;
                if v.rows() != rows {
                    return Err(mismatch("concat_cols", &vals[0], v));
                }
            }
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::matrix(rows, total, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.record(Op::ConcatCols(ids.clone()), out, &ids))
    }
}
