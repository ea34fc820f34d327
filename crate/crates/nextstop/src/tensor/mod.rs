//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records every operation applied to its [`Tensor`]s during a
//! forward pass. [`Tape::backward`] then walks the recording in reverse and
//! accumulates gradients into every leaf created with `requires_grad`.
//!
//! The engine is deliberately small: 2-D tensors only, single-threaded per
//! tape, no kernels beyond what the model needs. Sequences are handled as
//! loops over time steps. Multiple independent tapes may run concurrently;
//! a single tape must not be shared across threads.
//!
//! ```
//! use nextstop::tensor::{Matrix, Tape};
//!
//! let tape = Tape::new();
//! let w = tape.leaf(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), true);
//! let loss = w.hadamard(&w).sum();
//! tape.backward(&loss);
//! // d/dw sum(w*w) = 2w
//! assert_eq!(w.grad().unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
//! ```

mod archive;
mod matrix;

pub use archive::{read_archive, write_archive, ArchiveError};
pub use matrix::Matrix;

use std::cell::RefCell;
use std::rc::Rc;

/// Elementwise nonlinearity kinds supported by the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    LeakyRelu { slope: f64 },
    Elu { alpha: f64 },
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Elu { alpha } => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * (x.exp() - 1.0)
                }
            }
        }
    }

    /// Derivative given the input `x` and the already-computed output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Elu { alpha } => {
                if x >= 0.0 {
                    1.0
                } else {
                    y + alpha
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BroadcastAxis {
    /// Vector is `m x 1`; entry `i` is added across row `i`.
    Col,
    /// Vector is `1 x n`; entry `j` is added down column `j`.
    Row,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Hadamard { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    BroadcastAdd { a: usize, v: usize, axis: BroadcastAxis },
    Transpose { a: usize },
    ConcatRows { a: usize, b: usize },
    ConcatCols { a: usize, b: usize },
    SliceRows { a: usize, from: usize, to: usize },
    GatherRows { a: usize, ids: Vec<usize> },
    Sum { a: usize },
    Mean { a: usize },
    Activate { a: usize, kind: Activation },
    MaskedSoftmaxRows { a: usize, mask: Matrix },
    LogSoftmaxRows { a: usize },
}

struct Node {
    value: Matrix,
    op: Op,
    /// Whether gradients flow into or through this node.
    tracked: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl TapeInner {
    fn accumulate(&mut self, idx: usize, delta: Matrix) {
        if !self.nodes[idx].tracked {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }
}

/// A recording of one forward computation.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf holding `value`. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Matrix, requires_grad: bool) -> Tensor {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradients (masks, labels, fixed inputs).
    pub fn constant(&self, value: Matrix) -> Tensor {
        self.leaf(value, false)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Tensor {
        self.constant(Matrix::zeros(rows, cols))
    }

    fn push(&self, value: Matrix, op: Op, tracked: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { value, op, tracked });
        inner.grads.push(None);
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// Propagate gradients from a scalar loss back to every tracked leaf.
    ///
    /// Repeated calls accumulate: gradients are not zeroed between calls.
    pub fn backward(&self, loss: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.inner, &loss.tape.inner),
            "loss tensor belongs to a different tape"
        );
        let mut inner = self.inner.borrow_mut();
        let shape = inner.nodes[loss.id].value.shape();
        assert_eq!(shape, (1, 1), "backward seed must be scalar, got {shape:?}");
        let seed = Matrix::from_vec(1, 1, vec![1.0]);
        inner.accumulate(loss.id, seed);

        for idx in (0..=loss.id).rev() {
            if !inner.nodes[idx].tracked || matches!(inner.nodes[idx].op, Op::Leaf) {
                // Leaf gradients persist across backward calls; everything
                // else is consumed as it is propagated.
                continue;
            }
            let Some(grad) = inner.grads[idx].take() else {
                continue;
            };
            match &inner.nodes[idx].op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = grad.matmul_nt(&inner.nodes[b].value);
                    let db = inner.nodes[a].value.matmul_tn(&grad);
                    inner.accumulate(a, da);
                    inner.accumulate(b, db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    inner.accumulate(a, grad.clone());
                    inner.accumulate(b, grad);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    inner.accumulate(a, grad.clone());
                    inner.accumulate(b, grad.scale(-1.0));
                }
                Op::Hadamard { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = grad.hadamard(&inner.nodes[b].value);
                    let db = grad.hadamard(&inner.nodes[a].value);
                    inner.accumulate(a, da);
                    inner.accumulate(b, db);
                }
                Op::Scale { a, factor } => {
                    let (a, factor) = (*a, *factor);
                    inner.accumulate(a, grad.scale(factor));
                }
                Op::BroadcastAdd { a, v, axis } => {
                    let (a, v, axis) = (*a, *v, *axis);
                    let dv = match axis {
                        BroadcastAxis::Col => Matrix::from_vec(grad.rows(), 1, grad.row_sums()),
                        BroadcastAxis::Row => Matrix::from_vec(1, grad.cols(), grad.col_sums()),
                    };
                    inner.accumulate(a, grad);
                    inner.accumulate(v, dv);
                }
                Op::Transpose { a } => {
                    let a = *a;
                    inner.accumulate(a, grad.transpose());
                }
                Op::ConcatRows { a, b } => {
                    let (a, b) = (*a, *b);
                    let ra = inner.nodes[a].value.rows();
                    let cols = grad.cols();
                    let da = Matrix::from_vec(ra, cols, grad.data()[..ra * cols].to_vec());
                    let db = Matrix::from_vec(
                        grad.rows() - ra,
                        cols,
                        grad.data()[ra * cols..].to_vec(),
                    );
                    inner.accumulate(a, da);
                    inner.accumulate(b, db);
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let ca = inner.nodes[a].value.cols();
                    let cb = grad.cols() - ca;
                    let rows = grad.rows();
                    let mut da = Matrix::zeros(rows, ca);
                    let mut db = Matrix::zeros(rows, cb);
                    for i in 0..rows {
                        da.row_mut(i).copy_from_slice(&grad.row(i)[..ca]);
                        db.row_mut(i).copy_from_slice(&grad.row(i)[ca..]);
                    }
                    inner.accumulate(a, da);
                    inner.accumulate(b, db);
                }
                Op::SliceRows { a, from, to } => {
                    let (a, from, to) = (*a, *from, *to);
                    let parent = &inner.nodes[a].value;
                    let mut da = Matrix::zeros(parent.rows(), parent.cols());
                    for (out_i, parent_i) in (from..to).enumerate() {
                        da.row_mut(parent_i).copy_from_slice(grad.row(out_i));
                    }
                    inner.accumulate(a, da);
                }
                Op::GatherRows { a, ids } => {
                    let (a, ids) = (*a, ids.clone());
                    let parent = &inner.nodes[a].value;
                    let mut da = Matrix::zeros(parent.rows(), parent.cols());
                    for (pos, &id) in ids.iter().enumerate() {
                        let g_row = grad.row(pos);
                        for (d, g) in da.row_mut(id).iter_mut().zip(g_row) {
                            *d += g;
                        }
                    }
                    inner.accumulate(a, da);
                }
                Op::Sum { a } => {
                    let a = *a;
                    let s = grad[(0, 0)];
                    let parent = &inner.nodes[a].value;
                    let da = Matrix::from_vec(
                        parent.rows(),
                        parent.cols(),
                        vec![s; parent.len()],
                    );
                    inner.accumulate(a, da);
                }
                Op::Mean { a } => {
                    let a = *a;
                    let parent = &inner.nodes[a].value;
                    let s = grad[(0, 0)] / parent.len() as f64;
                    let da = Matrix::from_vec(
                        parent.rows(),
                        parent.cols(),
                        vec![s; parent.len()],
                    );
                    inner.accumulate(a, da);
                }
                Op::Activate { a, kind } => {
                    let (a, kind) = (*a, *kind);
                    let input = &inner.nodes[a].value;
                    let output = &inner.nodes[idx].value;
                    let mut da = grad.clone();
                    for ((d, &x), &y) in da
                        .data_mut()
                        .iter_mut()
                        .zip(input.data())
                        .zip(output.data())
                    {
                        *d *= kind.derivative(x, y);
                    }
                    inner.accumulate(a, da);
                }
                Op::MaskedSoftmaxRows { a, mask } => {
                    let a = *a;
                    let alpha = &inner.nodes[idx].value;
                    let n = alpha.rows();
                    let mut da = Matrix::zeros(n, alpha.cols());
                    for i in 0..n {
                        let dot: f64 = (0..alpha.cols())
                            .filter(|&j| mask[(i, j)] > 0.0)
                            .map(|j| grad[(i, j)] * alpha[(i, j)])
                            .sum();
                        for j in 0..alpha.cols() {
                            if mask[(i, j)] > 0.0 {
                                da[(i, j)] = alpha[(i, j)] * (grad[(i, j)] - dot);
                            }
                        }
                    }
                    inner.accumulate(a, da);
                }
                Op::LogSoftmaxRows { a } => {
                    let a = *a;
                    let out = &inner.nodes[idx].value;
                    let mut da = grad.clone();
                    for i in 0..out.rows() {
                        let g_sum: f64 = grad.row(i).iter().sum();
                        for (d, &o) in da.row_mut(i).iter_mut().zip(out.row(i)) {
                            *d -= o.exp() * g_sum;
                        }
                    }
                    inner.accumulate(a, da);
                }
            }
        }
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl Tensor {
    /// The tape this tensor is recorded on.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|v| v.shape())
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Clone of the stored value.
    pub fn value(&self) -> Matrix {
        self.with_value(|v| v.clone())
    }

    /// Borrowing accessor; avoids a clone for read-only inspection.
    pub fn with_value<T>(&self, f: impl FnOnce(&Matrix) -> T) -> T {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    /// The scalar held by a 1x1 tensor.
    pub fn scalar(&self) -> f64 {
        self.with_value(|v| {
            assert_eq!(v.shape(), (1, 1), "scalar() on {:?} tensor", v.shape());
            v[(0, 0)]
        })
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Matrix> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    fn binary(&self, other: &Tensor, op: impl FnOnce(usize, usize) -> Op, value: Matrix) -> Tensor {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "operands belong to different tapes"
        );
        let tracked = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].tracked || inner.nodes[other.id].tracked
        };
        self.tape.push(value, op(self.id, other.id), tracked)
    }

    fn unary(&self, op: Op, value: Matrix) -> Tensor {
        let tracked = self.tape.inner.borrow().nodes[self.id].tracked;
        self.tape.push(value, op, tracked)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let value = self.with_value(|a| other.with_value(|b| a.matmul(b)));
        self.binary(other, |a, b| Op::MatMul { a, b }, value)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let value = self.with_value(|a| other.with_value(|b| a.add(b)));
        self.binary(other, |a, b| Op::Add { a, b }, value)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let value = self.with_value(|a| {
            other.with_value(|b| {
                assert_eq!(
                    a.shape(),
                    b.shape(),
                    "sub shape mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                a.add(&b.scale(-1.0))
            })
        });
        self.binary(other, |a, b| Op::Sub { a, b }, value)
    }

    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        let value = self.with_value(|a| other.with_value(|b| a.hadamard(b)));
        self.binary(other, |a, b| Op::Hadamard { a, b }, value)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let value = self.with_value(|a| a.scale(factor));
        self.unary(
            Op::Scale {
                a: self.id,
                factor,
            },
            value,
        )
    }

    /// Add a row vector (`1 x n`) to every row or a column vector (`m x 1`)
    /// to every column of `self`.
    pub fn broadcast_add(&self, vector: &Tensor) -> Tensor {
        let (m, n) = self.shape();
        let (vr, vc) = vector.shape();
        let axis = if vr == m && vc == 1 {
            BroadcastAxis::Col
        } else if vr == 1 && vc == n {
            BroadcastAxis::Row
        } else {
            panic!("broadcast_add shape mismatch: {:?} + {:?}", (m, n), (vr, vc));
        };
        let value = self.with_value(|a| {
            vector.with_value(|v| {
                let mut out = a.clone();
                match axis {
                    BroadcastAxis::Col => {
                        for i in 0..m {
                            let vi = v[(i, 0)];
                            for x in out.row_mut(i) {
                                *x += vi;
                            }
                        }
                    }
                    BroadcastAxis::Row => {
                        for i in 0..m {
                            for (x, &vj) in out.row_mut(i).iter_mut().zip(v.row(0)) {
                                *x += vj;
                            }
                        }
                    }
                }
                out
            })
        });
        self.binary(vector, |a, v| Op::BroadcastAdd { a, v, axis }, value)
    }

    pub fn transpose(&self) -> Tensor {
        let value = self.with_value(|a| a.transpose());
        self.unary(Op::Transpose { a: self.id }, value)
    }

    pub fn concat_rows(&self, other: &Tensor) -> Tensor {
        let value = self.with_value(|a| {
            other.with_value(|b| {
                assert_eq!(
                    a.cols(),
                    b.cols(),
                    "concat_rows column mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                let mut data = a.data().to_vec();
                data.extend_from_slice(b.data());
                Matrix::from_vec(a.rows() + b.rows(), a.cols(), data)
            })
        });
        self.binary(other, |a, b| Op::ConcatRows { a, b }, value)
    }

    pub fn concat_cols(&self, other: &Tensor) -> Tensor {
        let value = self.with_value(|a| {
            other.with_value(|b| {
                assert_eq!(
                    a.rows(),
                    b.rows(),
                    "concat_cols row mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
                for i in 0..a.rows() {
                    out.row_mut(i)[..a.cols()].copy_from_slice(a.row(i));
                    out.row_mut(i)[a.cols()..].copy_from_slice(b.row(i));
                }
                out
            })
        });
        self.binary(other, |a, b| Op::ConcatCols { a, b }, value)
    }

    /// Rows `[from, to)` as a new tensor.
    pub fn slice_rows(&self, from: usize, to: usize) -> Tensor {
        let value = self.with_value(|a| {
            assert!(
                from <= to && to <= a.rows(),
                "slice_rows [{from}, {to}) out of range for {} rows",
                a.rows()
            );
            Matrix::from_vec(
                to - from,
                a.cols(),
                a.data()[from * a.cols()..to * a.cols()].to_vec(),
            )
        });
        self.unary(
            Op::SliceRows {
                a: self.id,
                from,
                to,
            },
            value,
        )
    }

    /// Row lookup by index list. Backward scatter-adds into the source, so
    /// repeated ids accumulate.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        let value = self.with_value(|a| {
            let mut out = Matrix::zeros(ids.len(), a.cols());
            for (pos, &id) in ids.iter().enumerate() {
                assert!(id < a.rows(), "gather id {id} out of range ({} rows)", a.rows());
                out.row_mut(pos).copy_from_slice(a.row(id));
            }
            out
        });
        self.unary(
            Op::GatherRows {
                a: self.id,
                ids: ids.to_vec(),
            },
            value,
        )
    }

    pub fn sum(&self) -> Tensor {
        let value = self.with_value(|a| Matrix::from_vec(1, 1, vec![a.sum()]));
        self.unary(Op::Sum { a: self.id }, value)
    }

    pub fn mean(&self) -> Tensor {
        let value = self.with_value(|a| Matrix::from_vec(1, 1, vec![a.sum() / a.len() as f64]));
        self.unary(Op::Mean { a: self.id }, value)
    }

    pub fn activate(&self, kind: Activation) -> Tensor {
        let value = self.with_value(|a| a.map(|x| kind.apply(x)));
        self.unary(Op::Activate { a: self.id, kind }, value)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.activate(Activation::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.activate(Activation::Tanh)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.activate(Activation::LeakyRelu { slope })
    }

    pub fn elu(&self, alpha: f64) -> Tensor {
        self.activate(Activation::Elu { alpha })
    }

    /// Row-wise softmax restricted to positions where `mask > 0`.
    ///
    /// Masked-out entries are exactly zero in both value and gradient. Every
    /// row of the mask must have at least one admitted entry; callers
    /// guarantee that with self-loops.
    pub fn masked_softmax_rows(&self, mask: &Matrix) -> Tensor {
        self.masked_softmax_rows_impl(mask, false)
    }

    /// Like [`Tensor::masked_softmax_rows`] but an all-masked row yields an
    /// all-zero row instead of panicking. Used where a graph layer may
    /// legitimately contain nodes without neighbors.
    pub fn masked_softmax_rows_allow_empty(&self, mask: &Matrix) -> Tensor {
        self.masked_softmax_rows_impl(mask, true)
    }

    fn masked_softmax_rows_impl(&self, mask: &Matrix, allow_empty: bool) -> Tensor {
        let value = self.with_value(|e| {
            assert_eq!(
                e.shape(),
                mask.shape(),
                "mask shape {:?} does not match scores {:?}",
                mask.shape(),
                e.shape()
            );
            let (n, m) = e.shape();
            let mut out = Matrix::zeros(n, m);
            for i in 0..n {
                let admitted: Vec<usize> = (0..m).filter(|&j| mask[(i, j)] > 0.0).collect();
                if admitted.is_empty() {
                    assert!(allow_empty, "masked softmax: row {i} admits no entries");
                    continue;
                }
                let max = admitted
                    .iter()
                    .map(|&j| e[(i, j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for &j in &admitted {
                    let w = (e[(i, j)] - max).exp();
                    out[(i, j)] = w;
                    denom += w;
                }
                for &j in &admitted {
                    out[(i, j)] /= denom;
                }
            }
            out
        });
        self.unary(
            Op::MaskedSoftmaxRows {
                a: self.id,
                mask: mask.clone(),
            },
            value,
        )
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax_rows(&self) -> Tensor {
        let value = self.with_value(|a| {
            let mut out = a.clone();
            for i in 0..a.rows() {
                let row = out.row_mut(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                for x in row {
                    *x -= lse;
                }
            }
            out
        });
        self.unary(Op::LogSoftmaxRows { a: self.id }, value)
    }
}
