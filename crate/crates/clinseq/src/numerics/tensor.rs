//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Tensors are reference-counted handles onto heap nodes. Building an op
//! records the parents and any context its backward pass needs; calling
//! [`Tensor::backward`] on a scalar walks the recorded graph once in
//! reverse topological order and accumulates gradients into every
//! reachable leaf that was created with [`Tensor::param`]. Gradients
//! accumulate across repeated backward calls until [`Tensor::zero_grad`].
//!
//! Everything is `f64`. Shapes are `rows x cols`; scalars are `1 x 1`.
//! Graphs are single-threaded (handles are `Rc`), but the raw kernels
//! parallelize internally over output rows, which keeps results bitwise
//! deterministic regardless of thread count.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with graph recording disabled on this thread.
///
/// Ops built inside the closure produce plain leaves, so forward passes
/// used only for evaluation cost no graph memory.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD.with(|flag| {
        let prev = flag.replace(true);
        let out = f();
        flag.set(prev);
        out
    })
}

fn recording() -> bool {
    NO_GRAD.with(|flag| !flag.get())
}

/// Where a composed vocabulary embedding row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSource {
    /// Row `i` of the plain token table.
    Token(usize),
    /// Sum of measure row `m` and shared ordinal row `o`.
    Factored { measure: usize, ordinal: usize },
}

/// One ordinal target for the earth-mover loss: the five sibling columns
/// of `row` in the logits matrix, and which of them is the target bin.
#[derive(Debug, Clone)]
pub struct EmdGroup {
    pub row: usize,
    pub ids: [usize; 5],
    pub target_bin: usize,
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    AddConst(Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Matmul(Tensor, Tensor),
    MatmulBt(Tensor, Tensor),
    GatherRows(Tensor, Vec<usize>),
    ComposeEmbed {
        tokens: Tensor,
        measures: Tensor,
        ordinals: Tensor,
        layout: Vec<RowSource>,
    },
    SoftmaxRows(Tensor),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Tensor),
    Sigmoid(Tensor),
    Log(Tensor),
    Exp(Tensor),
    ConcatRows(Vec<Tensor>),
    NarrowCols {
        x: Tensor,
        start: usize,
    },
    SumAll(Tensor),
    MeanAll(Tensor),
    Attention {
        qkv: Tensor,
        batch: usize,
        seq_len: usize,
        n_heads: usize,
        probs: Vec<f64>,
    },
    WeightedCe {
        logits: Tensor,
        targets: Vec<usize>,
        weights: Vec<f64>,
        n_valid: usize,
        probs: Vec<f64>,
    },
    ZilnNll {
        params: Tensor,
        target_dts: Vec<f64>,
        valid: Vec<bool>,
        n_valid: usize,
    },
    OrdinalEmd {
        logits: Tensor,
        groups: Vec<EmdGroup>,
        probs: Vec<[f64; 5]>,
    },
}

struct Node {
    id: u64,
    rows: usize,
    cols: usize,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    tracked: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// A 2-D tensor handle. Cloning clones the handle, not the storage.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &[self.0.rows, self.0.cols])
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    // ── Constructors ────────────────────────────────────────────────────

    fn new(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Op) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        let tracked = requires_grad || !matches!(op, Op::Leaf);
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            rows,
            cols,
            data: RefCell::new(data),
            requires_grad,
            tracked,
            grad: RefCell::new(None),
            op,
        }))
    }

    fn op_result(rows: usize, cols: usize, data: Vec<f64>, op: Op, any_tracked: bool) -> Self {
        if recording() && any_tracked {
            Self::new(rows, cols, data, false, op)
        } else {
            Self::new(rows, cols, data, false, Op::Leaf)
        }
    }

    /// A constant leaf from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Numerics {
                op: "from_vec",
                reason: format!("{} values for shape {rows}x{cols}", data.len()),
            });
        }
        Ok(Self::new(rows, cols, data, false, Op::Leaf))
    }

    /// A trainable leaf: participates in backward and accumulates `grad`.
    pub fn param(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Numerics {
                op: "param",
                reason: format!("{} values for shape {rows}x{cols}", data.len()),
            });
        }
        Ok(Self::new(rows, cols, data, true, Op::Leaf))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols], false, Op::Leaf)
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v], false, Op::Leaf)
    }

    /// A trainable leaf with N(0, std^2) entries.
    pub fn randn_param<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self::new(rows, cols, data, true, Op::Leaf)
    }

    /// A trainable leaf of zeros.
    pub fn zeros_param(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols], true, Op::Leaf)
    }

    // ── Accessors ───────────────────────────────────────────────────────

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.0.rows, self.0.cols]
    }

    pub fn len(&self) -> usize {
        self.0.rows * self.0.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Borrow the raw row-major values.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutably borrow the raw values. Intended for optimizers and
    /// finite-difference probes on leaves; mutating an interior node of a
    /// live graph invalidates saved context.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Numerics {
                op: "item",
                reason: format!("tensor is {}x{}, not scalar", self.0.rows, self.0.cols),
            });
        }
        Ok(self.0.data.borrow()[0])
    }

    /// Accumulated gradient, if any backward pass has reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Replaces the stored gradient outright (used by clipping and by
    /// tests that inject synthetic gradients).
    pub fn set_grad(&self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.len());
        *self.0.grad.borrow_mut() = Some(g);
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn shape_err(&self, op: &'static str, other: &Tensor) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: vec![self.0.rows, self.0.cols],
            rhs: vec![other.0.rows, other.0.cols],
        }
    }

    // ── Elementwise and broadcast ops ───────────────────────────────────

    /// Elementwise sum. `other` may also be a single row `1 x n`
    /// broadcast over the `m x n` receiver (the bias case).
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (r, c) = (self.0.rows, self.0.cols);
        let a = self.0.data.borrow();
        let b = other.0.data.borrow();
        let tracked = self.0.tracked || other.0.tracked;
        if other.0.rows == r && other.0.cols == c {
            let data = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
            drop(a);
            drop(b);
            Ok(Tensor::op_result(
                r,
                c,
                data,
                Op::Add(self.clone(), other.clone()),
                tracked,
            ))
        } else if other.0.rows == 1 && other.0.cols == c {
            let mut data = a.clone();
            for row in data.chunks_mut(c) {
                for (x, y) in row.iter_mut().zip(b.iter()) {
                    *x += y;
                }
            }
            drop(a);
            drop(b);
            Ok(Tensor::op_result(
                r,
                c,
                data,
                Op::AddRow(self.clone(), other.clone()),
                tracked,
            ))
        } else {
            Err(self.shape_err("add", other))
        }
    }

    /// Adds a constant matrix which may contain `-inf` entries; used for
    /// masked additive attention biases. The constant gets no gradient.
    pub fn add_const(&self, bias: &Tensor) -> Result<Tensor> {
        if self.shape() != bias.shape() {
            return Err(self.shape_err("add_const", bias));
        }
        let data = {
            let a = self.0.data.borrow();
            let b = bias.0.data.borrow();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Ok(Tensor::op_result(
            self.0.rows,
            self.0.cols,
            data,
            Op::AddConst(self.clone()),
            self.0.tracked,
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(self.shape_err("sub", other));
        }
        let data = {
            let a = self.0.data.borrow();
            let b = other.0.data.borrow();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        let tracked = self.0.tracked || other.0.tracked;
        Ok(Tensor::op_result(
            self.0.rows,
            self.0.cols,
            data,
            Op::Sub(self.clone(), other.clone()),
            tracked,
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(self.shape_err("mul", other));
        }
        let data = {
            let a = self.0.data.borrow();
            let b = other.0.data.borrow();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let tracked = self.0.tracked || other.0.tracked;
        Ok(Tensor::op_result(
            self.0.rows,
            self.0.cols,
            data,
            Op::Mul(self.clone(), other.clone()),
            tracked,
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.0.data.borrow().iter().map(|x| x * s).collect();
        Tensor::op_result(
            self.0.rows,
            self.0.cols,
            data,
            Op::Scale(self.clone(), s),
            self.0.tracked,
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self
            .0
            .data
            .borrow()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        Tensor::op_result(
            self.0.rows,
            self.0.cols,
            data,
            Op::Sigmoid(self.clone()),
            self.0.tracked,
        )
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        {
            let a = self.0.data.borrow();
            if let Some(bad) = a.iter().find(|x| **x <= 0.0) {
                return Err(Error::Numerics {
                    op: "log",
                    reason: format!("non-positive entry {bad}"),
                });
            }
        }
        let data = self.0.data.borrow().iter().map(|x| x.ln()).collect();
        Ok(Tensor::op_result(
            self.0.rows,
            self.0.cols,
            data,
            Op::Log(self.clone()),
            self.0.tracked,
        ))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.0.data.borrow().iter().map(|x| x.exp()).collect();
        Tensor::op_result(
            self.0.rows,
            self.0.cols,
            data,
            Op::Exp(self.clone()),
            self.0.tracked,
        )
    }

    pub fn gelu(&self) -> Tensor {
        let data = self.0.data.borrow().iter().map(|&x| gelu_scalar(x)).collect();
        Tensor::op_result(
            self.0.rows,
            self.0.cols,
            data,
            Op::Gelu(self.clone()),
            self.0.tracked,
        )
    }

    // ── Matrix ops ──────────────────────────────────────────────────────

    /// `self (m x k) @ other (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.0.cols != other.0.rows {
            return Err(self.shape_err("matmul", other));
        }
        let (m, k, n) = (self.0.rows, self.0.cols, other.0.cols);
        let data = matmul_nn(&self.0.data.borrow(), &other.0.data.borrow(), m, k, n);
        let tracked = self.0.tracked || other.0.tracked;
        Ok(Tensor::op_result(
            m,
            n,
            data,
            Op::Matmul(self.clone(), other.clone()),
            tracked,
        ))
    }

    /// `self (m x k) @ other (n x k) transposed`, i.e. `self @ other^T`.
    pub fn matmul_bt(&self, other: &Tensor) -> Result<Tensor> {
        if self.0.cols != other.0.cols {
            return Err(self.shape_err("matmul_bt", other));
        }
        let (m, k, n) = (self.0.rows, self.0.cols, other.0.rows);
        let data = matmul_nt(&self.0.data.borrow(), &other.0.data.borrow(), m, k, n);
        let tracked = self.0.tracked || other.0.tracked;
        Ok(Tensor::op_result(
            m,
            n,
            data,
            Op::MatmulBt(self.clone(), other.clone()),
            tracked,
        ))
    }

    /// Row lookup: out[i] = self[ids[i]]. The embedding-gather op.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = (self.0.rows, self.0.cols);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Numerics {
                op: "gather_rows",
                reason: format!("row index {bad} out of range for {v} rows"),
            });
        }
        let a = self.0.data.borrow();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&a[i * d..(i + 1) * d]);
        }
        drop(a);
        Ok(Tensor::op_result(
            ids.len(),
            d,
            data,
            Op::GatherRows(self.clone(), ids.to_vec()),
            self.0.tracked,
        ))
    }

    /// Builds the effective `V x d` embedding matrix from a plain token
    /// table plus factored measure/ordinal tables, row by row according
    /// to `layout`. Gradients scatter back into all three tables.
    pub fn compose_embedding(
        tokens: &Tensor,
        measures: &Tensor,
        ordinals: &Tensor,
        layout: &[RowSource],
    ) -> Result<Tensor> {
        let d = tokens.0.cols;
        if measures.0.cols != d || ordinals.0.cols != d {
            return Err(Error::Numerics {
                op: "compose_embedding",
                reason: format!(
                    "column mismatch: tokens {d}, measures {}, ordinals {}",
                    measures.0.cols, ordinals.0.cols
                ),
            });
        }
        let tok = tokens.0.data.borrow();
        let mea = measures.0.data.borrow();
        let ord = ordinals.0.data.borrow();
        let mut data = Vec::with_capacity(layout.len() * d);
        for src in layout {
            match *src {
                RowSource::Token(i) => {
                    if i >= tokens.0.rows {
                        return Err(Error::Numerics {
                            op: "compose_embedding",
                            reason: format!("token row {i} out of range"),
                        });
                    }
                    data.extend_from_slice(&tok[i * d..(i + 1) * d]);
                }
                RowSource::Factored { measure, ordinal } => {
                    if measure >= measures.0.rows || ordinal >= ordinals.0.rows {
                        return Err(Error::Numerics {
                            op: "compose_embedding",
                            reason: format!("factored row ({measure}, {ordinal}) out of range"),
                        });
                    }
                    let m = &mea[measure * d..(measure + 1) * d];
                    let o = &ord[ordinal * d..(ordinal + 1) * d];
                    data.extend(m.iter().zip(o).map(|(x, y)| x + y));
                }
            }
        }
        drop(tok);
        drop(mea);
        drop(ord);
        let tracked = tokens.0.tracked || measures.0.tracked || ordinals.0.tracked;
        Ok(Tensor::op_result(
            layout.len(),
            d,
            data,
            Op::ComposeEmbed {
                tokens: tokens.clone(),
                measures: measures.clone(),
                ordinals: ordinals.clone(),
                layout: layout.to_vec(),
            },
            tracked,
        ))
    }

    // ── Normalization and reductions ────────────────────────────────────

    /// Row-wise softmax. Rows may contain `-inf` (masked) entries but not
    /// be fully masked.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = (self.0.rows, self.0.cols);
        let a = self.0.data.borrow();
        let mut data = vec![0.0; r * c];
        for (i, row) in a.chunks(c).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::Numerics {
                    op: "softmax_rows",
                    reason: format!("row {i} fully masked"),
                });
            }
            let out = &mut data[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        drop(a);
        Ok(Tensor::op_result(
            r,
            c,
            data,
            Op::SoftmaxRows(self.clone()),
            self.0.tracked,
        ))
    }

    /// Row-wise layer normalization with learned affine `gamma`, `beta`
    /// (both `1 x n`).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = (self.0.rows, self.0.cols);
        if gamma.shape() != [1, c] {
            return Err(self.shape_err("layer_norm(gamma)", gamma));
        }
        if beta.shape() != [1, c] {
            return Err(self.shape_err("layer_norm(beta)", beta));
        }
        let a = self.0.data.borrow();
        let g = gamma.0.data.borrow();
        let b = beta.0.data.borrow();
        let mut data = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * g[j] + b[j];
            }
        }
        drop(a);
        drop(g);
        drop(b);
        let tracked = self.0.tracked || gamma.0.tracked || beta.0.tracked;
        Ok(Tensor::op_result(
            r,
            c,
            data,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Stacks tensors with equal column counts on top of one another.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::Numerics {
                op: "concat_rows",
                reason: "no tensors given".into(),
            });
        };
        let c = first.0.cols;
        let mut rows = 0;
        for p in parts {
            if p.0.cols != c {
                return Err(first.shape_err("concat_rows", p));
            }
            rows += p.0.rows;
        }
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            data.extend_from_slice(&p.0.data.borrow());
        }
        let tracked = parts.iter().any(|p| p.0.tracked);
        Ok(Tensor::op_result(
            rows,
            c,
            data,
            Op::ConcatRows(parts.to_vec()),
            tracked,
        ))
    }

    /// Column slice `[start, start + len)` of every row.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = (self.0.rows, self.0.cols);
        if start + len > c {
            return Err(Error::Numerics {
                op: "narrow_cols",
                reason: format!("slice {start}..{} out of {c} columns", start + len),
            });
        }
        let a = self.0.data.borrow();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&a[i * c + start..i * c + start + len]);
        }
        drop(a);
        Ok(Tensor::op_result(
            r,
            len,
            data,
            Op::NarrowCols {
                x: self.clone(),
                start,
            },
            self.0.tracked,
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.0.data.borrow().iter().sum();
        Tensor::op_result(1, 1, vec![s], Op::SumAll(self.clone()), self.0.tracked)
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        let s = self.0.data.borrow().iter().sum::<f64>() / n;
        Tensor::op_result(1, 1, vec![s], Op::MeanAll(self.clone()), self.0.tracked)
    }

    // ── Fused model ops ─────────────────────────────────────────────────

    /// Multi-head causal self-attention with ALiBi biases, fused over a
    /// padded batch.
    ///
    /// `qkv` is `(batch * seq_len) x (3 * d_model)` with each row laid out
    /// `[q | k | v]`; heads split `d_model` evenly. Position `i` attends
    /// to `j <= i` within its own sequence with pre-softmax bias
    /// `-slope[h] * (i - j)`. Returns `(batch * seq_len) x d_model`.
    pub fn attention(qkv: &Tensor, batch: usize, seq_len: usize, slopes: &[f64]) -> Result<Tensor> {
        let rows = qkv.0.rows;
        let three_d = qkv.0.cols;
        if three_d % 3 != 0 {
            return Err(Error::Numerics {
                op: "attention",
                reason: format!("qkv width {three_d} not divisible by 3"),
            });
        }
        let d = three_d / 3;
        let n_heads = slopes.len();
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Numerics {
                op: "attention",
                reason: format!("{n_heads} heads do not divide d_model {d}"),
            });
        }
        if rows != batch * seq_len {
            return Err(Error::Numerics {
                op: "attention",
                reason: format!("{rows} rows != batch {batch} * seq_len {seq_len}"),
            });
        }
        let dh = d / n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let x_ref = qkv.0.data.borrow();
        let x: &[f64] = &x_ref;
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * n_heads * seq_len * seq_len];

        out.par_chunks_mut(seq_len * d)
            .zip(probs.par_chunks_mut(n_heads * seq_len * seq_len))
            .enumerate()
            .for_each(|(b, (out_b, probs_b))| {
                let base = b * seq_len;
                for h in 0..n_heads {
                    let slope = slopes[h];
                    let qo = h * dh;
                    let ko = d + h * dh;
                    let vo = 2 * d + h * dh;
                    let p_h = &mut probs_b[h * seq_len * seq_len..(h + 1) * seq_len * seq_len];
                    let mut scores = vec![0.0f64; seq_len];
                    for i in 0..seq_len {
                        let qi = &x[(base + i) * three_d + qo..(base + i) * three_d + qo + dh];
                        let mut m = f64::NEG_INFINITY;
                        for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                            let kj = &x[(base + j) * three_d + ko..(base + j) * three_d + ko + dh];
                            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                            *s = dot * inv_sqrt - slope * (i - j) as f64;
                            if *s > m {
                                m = *s;
                            }
                        }
                        let mut z = 0.0;
                        for s in scores.iter_mut().take(i + 1) {
                            *s = (*s - m).exp();
                            z += *s;
                        }
                        let row = &mut p_h[i * seq_len..i * seq_len + i + 1];
                        for (p, s) in row.iter_mut().zip(scores.iter()) {
                            *p = *s / z;
                        }
                        let o = &mut out_b[i * d + qo..i * d + qo + dh];
                        for (j, &p) in row.iter().enumerate() {
                            let vj = &x[(base + j) * three_d + vo..(base + j) * three_d + vo + dh];
                            for (ov, vv) in o.iter_mut().zip(vj) {
                                *ov += p * vv;
                            }
                        }
                    }
                }
            });
        drop(x_ref);
        Ok(Tensor::op_result(
            rows,
            d,
            out,
            Op::Attention {
                qkv: qkv.clone(),
                batch,
                seq_len,
                n_heads,
                probs,
            },
            qkv.0.tracked,
        ))
    }

    /// Category-weighted cross-entropy, averaged over valid positions.
    ///
    /// `weights[i]` is the loss weight of position `i`; a weight of
    /// exactly 0 marks the position invalid (padding). The scalar result
    /// is `sum_i w_i * ce_i / n_valid`, where `n_valid` counts positions
    /// with nonzero weight.
    pub fn weighted_cross_entropy(
        logits: &Tensor,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Tensor> {
        let (r, v) = (logits.0.rows, logits.0.cols);
        if targets.len() != r || weights.len() != r {
            return Err(Error::Numerics {
                op: "weighted_cross_entropy",
                reason: format!(
                    "{} targets / {} weights for {r} rows",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        if let Some(bad) = targets
            .iter()
            .zip(weights)
            .find(|(&t, &w)| w != 0.0 && t >= v)
        {
            return Err(Error::Numerics {
                op: "weighted_cross_entropy",
                reason: format!("target {} out of vocab {v}", bad.0),
            });
        }
        let x = logits.0.data.borrow();
        let mut probs = vec![0.0; r * v];
        let mut total = 0.0;
        let mut n_valid = 0usize;
        for i in 0..r {
            if weights[i] == 0.0 {
                continue;
            }
            n_valid += 1;
            let row = &x[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * v..(i + 1) * v];
            let mut z = 0.0;
            for (pp, &xx) in p.iter_mut().zip(row) {
                *pp = (xx - m).exp();
                z += *pp;
            }
            for pp in p.iter_mut() {
                *pp /= z;
            }
            let ce = z.ln() + m - row[targets[i]];
            total += weights[i] * ce;
        }
        drop(x);
        let loss = if n_valid == 0 {
            0.0
        } else {
            total / n_valid as f64
        };
        Ok(Tensor::op_result(
            1,
            1,
            vec![loss],
            Op::WeightedCe {
                logits: logits.clone(),
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                n_valid,
                probs,
            },
            logits.0.tracked,
        ))
    }

    /// Zero-inflated log-normal negative log likelihood, averaged over
    /// valid positions.
    ///
    /// `params` is `P x 3` rows of `(logit_z, mu, log_sigma)`: the next
    /// gap is zero with probability `sigmoid(logit_z)`, otherwise
    /// `LogNormal(mu, exp(log_sigma))`. Targets must be nonnegative.
    pub fn ziln_nll(params: &Tensor, target_dts: &[f64], valid: &[bool]) -> Result<Tensor> {
        let r = params.0.rows;
        if params.0.cols != 3 {
            return Err(Error::Numerics {
                op: "ziln_nll",
                reason: format!("params must be P x 3, got {} cols", params.0.cols),
            });
        }
        if target_dts.len() != r || valid.len() != r {
            return Err(Error::Numerics {
                op: "ziln_nll",
                reason: format!("{} targets for {r} rows", target_dts.len()),
            });
        }
        if let Some(bad) = target_dts
            .iter()
            .zip(valid)
            .find(|(&t, &ok)| ok && !(t >= 0.0))
        {
            return Err(Error::Numerics {
                op: "ziln_nll",
                reason: format!("negative or NaN gap {}", bad.0),
            });
        }
        let x = params.0.data.borrow();
        let mut total = 0.0;
        let mut n_valid = 0usize;
        for i in 0..r {
            if !valid[i] {
                continue;
            }
            n_valid += 1;
            let (z, mu, ls) = (x[i * 3], x[i * 3 + 1], x[i * 3 + 2]);
            total += ziln_nll_point(z, mu, ls, target_dts[i]);
        }
        drop(x);
        let loss = if n_valid == 0 {
            0.0
        } else {
            total / n_valid as f64
        };
        Ok(Tensor::op_result(
            1,
            1,
            vec![loss],
            Op::ZilnNll {
                params: params.clone(),
                target_dts: target_dts.to_vec(),
                valid: valid.to_vec(),
                n_valid,
            },
            params.0.tracked,
        ))
    }

    /// Ordinal earth-mover loss over measure-local bins.
    ///
    /// For each group, softmax over the 5 sibling logits, then sum of
    /// absolute CDF differences against the one-hot target bin (range
    /// 0..=4). The scalar result averages over groups; no groups yields 0.
    pub fn ordinal_emd(logits: &Tensor, groups: &[EmdGroup]) -> Result<Tensor> {
        let (r, v) = (logits.0.rows, logits.0.cols);
        for g in groups {
            if g.row >= r || g.target_bin >= 5 || g.ids.iter().any(|&id| id >= v) {
                return Err(Error::Numerics {
                    op: "ordinal_emd",
                    reason: format!("group out of range: row {}, bin {}", g.row, g.target_bin),
                });
            }
        }
        let x = logits.0.data.borrow();
        let mut probs = Vec::with_capacity(groups.len());
        let mut total = 0.0;
        for g in groups {
            let z: Vec<f64> = g.ids.iter().map(|&id| x[g.row * v + id]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut p = [0.0f64; 5];
            let mut zsum = 0.0;
            for (pp, &zz) in p.iter_mut().zip(&z) {
                *pp = (zz - m).exp();
                zsum += *pp;
            }
            for pp in p.iter_mut() {
                *pp /= zsum;
            }
            let mut cdf = 0.0;
            let mut emd = 0.0;
            for (k, &pk) in p.iter().enumerate() {
                cdf += pk;
                let t = if k >= g.target_bin { 1.0 } else { 0.0 };
                emd += (cdf - t).abs();
            }
            total += emd;
            probs.push(p);
        }
        drop(x);
        let loss = if groups.is_empty() {
            0.0
        } else {
            total / groups.len() as f64
        };
        Ok(Tensor::op_result(
            1,
            1,
            vec![loss],
            Op::OrdinalEmd {
                logits: logits.clone(),
                groups: groups.to_vec(),
                probs,
            },
            logits.0.tracked,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar. Populates `grad` on every
    /// reachable `param` leaf; gradients accumulate across calls until
    /// `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Numerics {
                op: "backward",
                reason: format!(
                    "root must be scalar, got {}x{}",
                    self.0.rows, self.0.cols
                ),
            });
        }
        // Post-order DFS for a reverse topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            node.0.op.for_each_parent(|p| {
                if p.0.tracked && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            });
        }

        let mut grads: std::collections::HashMap<u64, Vec<f64>> =
            std::collections::HashMap::new();
        grads.insert(self.0.id, vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            if node.0.requires_grad {
                node.accumulate_grad(&g);
            }
            node.0.op.backward(node, &g, &mut grads);
        }
        Ok(())
    }
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(&Tensor)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                f(a);
                f(b);
            }
            Op::Matmul(a, b) | Op::MatmulBt(a, b) => {
                f(a);
                f(b);
            }
            Op::AddConst(a)
            | Op::Scale(a, _)
            | Op::GatherRows(a, _)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => f(a),
            Op::NarrowCols { x, .. } => f(x),
            Op::ComposeEmbed {
                tokens,
                measures,
                ordinals,
                ..
            } => {
                f(tokens);
                f(measures);
                f(ordinals);
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                f(x);
                f(gamma);
                f(beta);
            }
            Op::ConcatRows(parts) => parts.iter().for_each(f),
            Op::Attention { qkv, .. } => f(qkv),
            Op::WeightedCe { logits, .. } => f(logits),
            Op::ZilnNll { params, .. } => f(params),
            Op::OrdinalEmd { logits, .. } => f(logits),
        }
    }

    fn backward(
        &self,
        node: &Tensor,
        g: &[f64],
        grads: &mut std::collections::HashMap<u64, Vec<f64>>,
    ) {
        let mut send = |t: &Tensor, delta: Vec<f64>| {
            if !t.0.tracked {
                return;
            }
            match grads.entry(t.0.id) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(&delta) {
                        *a += b;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(delta);
                }
            }
        };
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            Op::AddRow(a, b) => {
                send(a, g.to_vec());
                let c = b.0.cols;
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                send(b, db);
            }
            Op::AddConst(a) => send(a, g.to_vec()),
            Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = a.0.data.borrow();
                let bv = b.0.data.borrow();
                send(a, g.iter().zip(bv.iter()).map(|(x, y)| x * y).collect());
                send(b, g.iter().zip(av.iter()).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => send(a, g.iter().map(|x| x * s).collect()),
            Op::Matmul(a, b) => {
                // c = a @ b: da = g @ b^T, db = a^T @ g
                let (m, k) = (a.0.rows, a.0.cols);
                let n = b.0.cols;
                send(a, matmul_nt(g, &b.0.data.borrow(), m, n, k));
                send(b, matmul_tn(&a.0.data.borrow(), g, m, k, n));
            }
            Op::MatmulBt(a, b) => {
                // c = a @ b^T: da = g @ b, db = g^T @ a
                let (m, k) = (a.0.rows, a.0.cols);
                let n = b.0.rows;
                send(a, matmul_nn(g, &b.0.data.borrow(), m, n, k));
                send(b, matmul_tn(g, &a.0.data.borrow(), m, n, k));
            }
            Op::GatherRows(table, ids) => {
                let (v, d) = (table.0.rows, table.0.cols);
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    let src = &g[i * d..(i + 1) * d];
                    let dst = &mut dt[id * d..(id + 1) * d];
                    for (x, y) in dst.iter_mut().zip(src) {
                        *x += y;
                    }
                }
                send(table, dt);
            }
            Op::ComposeEmbed {
                tokens,
                measures,
                ordinals,
                layout,
            } => {
                let d = tokens.0.cols;
                let mut dt = vec![0.0; tokens.0.rows * d];
                let mut dm = vec![0.0; measures.0.rows * d];
                let mut dor = vec![0.0; ordinals.0.rows * d];
                for (v, src) in layout.iter().enumerate() {
                    let gr = &g[v * d..(v + 1) * d];
                    match *src {
                        RowSource::Token(i) => {
                            for (x, y) in dt[i * d..(i + 1) * d].iter_mut().zip(gr) {
                                *x += y;
                            }
                        }
                        RowSource::Factored { measure, ordinal } => {
                            for (x, y) in dm[measure * d..(measure + 1) * d].iter_mut().zip(gr) {
                                *x += y;
                            }
                            for (x, y) in dor[ordinal * d..(ordinal + 1) * d].iter_mut().zip(gr) {
                                *x += y;
                            }
                        }
                    }
                }
                send(tokens, dt);
                send(measures, dm);
                send(ordinals, dor);
            }
            Op::SoftmaxRows(a) => {
                let c = node.0.cols;
                let y = node.0.data.borrow();
                let mut da = vec![0.0; y.len()];
                for i in 0..node.0.rows {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                drop(y);
                send(a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = (node.0.rows, node.0.cols);
                let gv = gamma.0.data.borrow();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut mean_dy = 0.0;
                    let mut mean_dyxh = 0.0;
                    for j in 0..c {
                        let dyh = gr[j] * gv[j];
                        mean_dy += dyh;
                        mean_dyxh += dyh * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dy /= c as f64;
                    mean_dyxh /= c as f64;
                    for j in 0..c {
                        let dyh = gr[j] * gv[j];
                        dx[i * c + j] = inv_std[i] * (dyh - mean_dy - xh[j] * mean_dyxh);
                    }
                }
                drop(gv);
                send(x, dx);
                send(gamma, dgamma);
                send(beta, dbeta);
            }
            Op::Gelu(a) => {
                let av = a.0.data.borrow();
                send(
                    a,
                    g.iter()
                        .zip(av.iter())
                        .map(|(gg, &x)| gg * gelu_grad(x))
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.0.data.borrow();
                send(
                    a,
                    g.iter().zip(y.iter()).map(|(gg, &v)| gg * v * (1.0 - v)).collect(),
                );
            }
            Op::Log(a) => {
                let av = a.0.data.borrow();
                send(a, g.iter().zip(av.iter()).map(|(gg, &x)| gg / x).collect());
            }
            Op::Exp(a) => {
                let y = node.0.data.borrow();
                send(a, g.iter().zip(y.iter()).map(|(gg, &v)| gg * v).collect());
            }
            Op::ConcatRows(parts) => {
                let c = node.0.cols;
                let mut offset = 0;
                for p in parts {
                    let n = p.0.rows * c;
                    send(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::NarrowCols { x, start } => {
                let (r, c) = (x.0.rows, x.0.cols);
                let len = node.0.cols;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                send(x, dx);
            }
            Op::SumAll(a) => send(a, vec![g[0]; a.len()]),
            Op::MeanAll(a) => {
                let s = g[0] / a.len().max(1) as f64;
                send(a, vec![s; a.len()]);
            }
            Op::Attention {
                qkv,
                batch,
                seq_len,
                n_heads,
                probs,
                ..
            } => {
                let (_batch, seq_len, n_heads) = (*batch, *seq_len, *n_heads);
                let three_d = qkv.0.cols;
                let d = three_d / 3;
                let dh = d / n_heads;
                let inv_sqrt = 1.0 / (dh as f64).sqrt();
                let x_ref = qkv.0.data.borrow();
                let x: &[f64] = &x_ref;
                let mut dqkv = vec![0.0; x.len()];
                dqkv.par_chunks_mut(seq_len * three_d)
                    .enumerate()
                    .for_each(|(b, dq_b)| {
                        let base = b * seq_len;
                        let g_b = &g[b * seq_len * d..(b + 1) * seq_len * d];
                        let probs_b =
                            &probs[b * n_heads * seq_len * seq_len..(b + 1) * n_heads * seq_len * seq_len];
                        let mut ds = vec![0.0f64; seq_len];
                        for h in 0..n_heads {
                            let qo = h * dh;
                            let ko = d + h * dh;
                            let vo = 2 * d + h * dh;
                            let p_h = &probs_b[h * seq_len * seq_len..(h + 1) * seq_len * seq_len];
                            for i in 0..seq_len {
                                let gi = &g_b[i * d + qo..i * d + qo + dh];
                                let pi = &p_h[i * seq_len..i * seq_len + i + 1];
                                // dp and the softmax jacobian, then dq/dk/dv.
                                let mut dot_pg = 0.0;
                                for (j, &p) in pi.iter().enumerate() {
                                    let vj = &x[(base + j) * three_d + vo
                                        ..(base + j) * three_d + vo + dh];
                                    let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                    ds[j] = dp;
                                    dot_pg += p * dp;
                                }
                                for (j, &p) in pi.iter().enumerate() {
                                    ds[j] = p * (ds[j] - dot_pg);
                                }
                                let qi = &x[(base + i) * three_d + qo
                                    ..(base + i) * three_d + qo + dh];
                                for (j, &p) in pi.iter().enumerate() {
                                    let s = ds[j] * inv_sqrt;
                                    let kj = &x[(base + j) * three_d + ko
                                        ..(base + j) * three_d + ko + dh];
                                    // dq_i += ds * k_j; dk_j += ds * q_i; dv_j += p * g_i
                                    let dqi = &mut dq_b[i * three_d + qo..i * three_d + qo + dh];
                                    for (a, b) in dqi.iter_mut().zip(kj) {
                                        *a += s * b;
                                    }
                                    let dkj = &mut dq_b[j * three_d + ko..j * three_d + ko + dh];
                                    for (a, b) in dkj.iter_mut().zip(qi) {
                                        *a += s * b;
                                    }
                                    let dvj = &mut dq_b[j * three_d + vo..j * three_d + vo + dh];
                                    for (a, b) in dvj.iter_mut().zip(gi) {
                                        *a += p * b;
                                    }
                                }
                            }
                        }
                    });
                drop(x_ref);
                send(qkv, dqkv);
            }
            Op::WeightedCe {
                logits,
                targets,
                weights,
                n_valid,
                probs,
            } => {
                let (r, v) = (logits.0.rows, logits.0.cols);
                let scale = g[0] / (*n_valid).max(1) as f64;
                let mut dl = vec![0.0; r * v];
                for i in 0..r {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let w = weights[i] * scale;
                    let p = &probs[i * v..(i + 1) * v];
                    let row = &mut dl[i * v..(i + 1) * v];
                    for (o, &pp) in row.iter_mut().zip(p) {
                        *o = w * pp;
                    }
                    row[targets[i]] -= w;
                }
                send(logits, dl);
            }
            Op::ZilnNll {
                params,
                target_dts,
                valid,
                n_valid,
            } => {
                let r = params.0.rows;
                let scale = g[0] / (*n_valid).max(1) as f64;
                let x = params.0.data.borrow();
                let mut dp = vec![0.0; r * 3];
                for i in 0..r {
                    if !valid[i] {
                        continue;
                    }
                    let (z, mu, ls) = (x[i * 3], x[i * 3 + 1], x[i * 3 + 2]);
                    let t = target_dts[i];
                    let sig_z = 1.0 / (1.0 + (-z).exp());
                    if t == 0.0 {
                        dp[i * 3] = scale * (sig_z - 1.0);
                    } else {
                        let sigma2 = (2.0 * ls).exp();
                        let resid = t.ln() - mu;
                        dp[i * 3] = scale * sig_z;
                        dp[i * 3 + 1] = scale * (-resid / sigma2);
                        dp[i * 3 + 2] = scale * (1.0 - resid * resid / sigma2);
                    }
                }
                drop(x);
                send(params, dp);
            }
            Op::OrdinalEmd {
                logits,
                groups,
                probs,
            } => {
                let (r, v) = (logits.0.rows, logits.0.cols);
                let scale = g[0] / groups.len().max(1) as f64;
                let mut dl = vec![0.0; r * v];
                for (gi, grp) in groups.iter().enumerate() {
                    let p = &probs[gi];
                    // dL/dP_k = sign(P_k - T_k); dL/dp_j = sum_{k >= j} sign_k
                    let mut cdf = 0.0;
                    let mut signs = [0.0f64; 5];
                    for k in 0..5 {
                        cdf += p[k];
                        let t = if k >= grp.target_bin { 1.0 } else { 0.0 };
                        signs[k] = (cdf - t).signum() * f64::from(cdf != t);
                    }
                    let mut dldp = [0.0f64; 5];
                    let mut suffix = 0.0;
                    for j in (0..5).rev() {
                        suffix += signs[j];
                        dldp[j] = suffix;
                    }
                    let dot: f64 = p.iter().zip(&dldp).map(|(a, b)| a * b).sum();
                    for j in 0..5 {
                        dl[grp.row * v + grp.ids[j]] += scale * p[j] * (dldp[j] - dot);
                    }
                }
                send(logits, dl);
            }
        }
    }
}

// ── Scalar math ─────────────────────────────────────────────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Pointwise zero-inflated log-normal NLL; shared with the frozen
/// inference path and with tests.
pub fn ziln_nll_point(logit_z: f64, mu: f64, log_sigma: f64, t: f64) -> f64 {
    // softplus(x) = ln(1 + e^x), computed stably.
    let softplus = |x: f64| {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    };
    if t == 0.0 {
        softplus(-logit_z)
    } else {
        const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;
        let sigma2 = (2.0 * log_sigma).exp();
        let resid = t.ln() - mu;
        softplus(logit_z) + t.ln() + log_sigma + HALF_LN_TWO_PI + resid * resid / (2.0 * sigma2)
    }
}

// ── Raw matmul kernels ──────────────────────────────────────────────────

const PAR_FLOP_THRESHOLD: usize = 1 << 17;

/// a (m x k) @ b (k x n) -> m x n
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let body = |i: usize, row_out: &mut [f64]| {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// a (m x k) @ b (n x k)^T -> m x n
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let body = |i: usize, row_out: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row_out.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// a (m x k)^T @ b (m x n) -> k x n
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let body = |p: usize, row_out: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, row)| body(p, row));
    } else {
        for (p, row) in out.chunks_mut(n).enumerate() {
            body(p, row);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    /// Finite-difference check of one scalar-valued graph against every
    /// given parameter, at tolerance 1e-6 (these are tiny graphs).
    fn fd_ok(params: &[(&str, Tensor)], f: impl Fn() -> Tensor) {
        let named: Vec<(String, Tensor)> = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let report = check_gradients(&named, || Ok(f()), 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {} on {:?}",
            report.max_rel_err,
            report.worst_tensor
        );
    }

    #[test]
    fn matmul_known_product() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_structured() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        match a.matmul(&b) {
            Err(crate::Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let mut r = rng();
        let a = Tensor::randn_param(4, 5, 1.0, &mut r);
        let b = Tensor::randn_param(3, 5, 1.0, &mut r);
        let c = a.matmul_bt(&b).unwrap();
        // b^T by hand
        let bv = b.to_vec();
        let mut bt = vec![0.0; 15];
        for i in 0..3 {
            for j in 0..5 {
                bt[j * 3 + i] = bv[i * 5 + j];
            }
        }
        let c2 = a.matmul(&Tensor::from_vec(5, 3, bt).unwrap()).unwrap();
        for (x, y) in c.to_vec().iter().zip(c2.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let t = Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_masks() {
        let t = Tensor::from_vec(2, 3, vec![2.0, -1.0, 0.5, f64::NEG_INFINITY, 1.0, 1.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        let v = s.to_vec();
        assert!((v[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v[3], 0.0);
        assert!((v[4] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let t = Tensor::from_vec(1, 2, vec![f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert!(t.softmax_rows().is_err());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut r = rng();
        let x = Tensor::randn_param(4, 16, 3.0, &mut r);
        let gamma = Tensor::from_vec(1, 16, vec![1.0; 16]).unwrap();
        let beta = Tensor::zeros(1, 16);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        for row in y.to_vec().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row var {var}");
        }
    }

    #[test]
    fn log_rejects_nonpositive() {
        let t = Tensor::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(t.log().is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let t = Tensor::zeros_param(2, 2);
        let y = t.scale(2.0);
        assert!(y.backward().is_err());
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let p = Tensor::param(1, 1, vec![3.0]).unwrap();
        let loss = || p.mul(&p).unwrap().sum_all();
        loss().backward().unwrap();
        assert!((p.grad().unwrap()[0] - 6.0).abs() < 1e-12);
        loss().backward().unwrap();
        assert!((p.grad().unwrap()[0] - 12.0).abs() < 1e-12);
        p.zero_grad();
        assert!(p.grad().is_none());
        loss().backward().unwrap();
        assert!((p.grad().unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn no_grad_suppresses_graph_recording() {
        let p = Tensor::param(1, 1, vec![2.0]).unwrap();
        let y = no_grad(|| p.mul(&p).unwrap().sum_all());
        y.backward().unwrap();
        assert!(p.grad().is_none());
    }

    #[test]
    fn shared_subexpression_gets_summed_gradient() {
        // y = p*p + p  => dy/dp = 2p + 1
        let p = Tensor::param(1, 1, vec![4.0]).unwrap();
        let y = p.mul(&p).unwrap().add(&p).unwrap().sum_all();
        y.backward().unwrap();
        assert!((p.grad().unwrap()[0] - 9.0).abs() < 1e-12);
    }

    // ── Finite-difference coverage for every op ─────────────────────────

    #[test]
    fn fd_add_sub_mul_scale() {
        let mut r = rng();
        let a = Tensor::randn_param(3, 4, 1.0, &mut r);
        let b = Tensor::randn_param(3, 4, 1.0, &mut r);
        fd_ok(&[("a", a.clone()), ("b", b.clone())], || {
            a.add(&b)
                .unwrap()
                .mul(&a.sub(&b).unwrap())
                .unwrap()
                .scale(0.7)
                .mean_all()
        });
    }

    #[test]
    fn fd_add_row_broadcast() {
        let mut r = rng();
        let a = Tensor::randn_param(3, 4, 1.0, &mut r);
        let bias = Tensor::randn_param(1, 4, 1.0, &mut r);
        fd_ok(&[("a", a.clone()), ("bias", bias.clone())], || {
            a.add(&bias).unwrap().gelu().sum_all()
        });
    }

    #[test]
    fn fd_add_const_with_mask() {
        let mut r = rng();
        let a = Tensor::randn_param(2, 3, 1.0, &mut r);
        let bias =
            Tensor::from_vec(2, 3, vec![0.0, f64::NEG_INFINITY, 0.3, 0.1, 0.0, f64::NEG_INFINITY])
                .unwrap();
        fd_ok(&[("a", a.clone())], || {
            a.add_const(&bias)
                .unwrap()
                .softmax_rows()
                .unwrap()
                .mul(&a)
                .unwrap()
                .mean_all()
        });
    }

    #[test]
    fn fd_matmul_both_orientations() {
        let mut r = rng();
        let a = Tensor::randn_param(3, 4, 1.0, &mut r);
        let b = Tensor::randn_param(4, 2, 1.0, &mut r);
        let c = Tensor::randn_param(5, 2, 1.0, &mut r);
        fd_ok(
            &[("a", a.clone()), ("b", b.clone()), ("c", c.clone())],
            || a.matmul(&b).unwrap().matmul_bt(&c).unwrap().mean_all(),
        );
    }

    #[test]
    fn fd_gather_and_compose() {
        let mut r = rng();
        let tok = Tensor::randn_param(6, 3, 1.0, &mut r);
        let mea = Tensor::randn_param(2, 3, 1.0, &mut r);
        let ord = Tensor::randn_param(5, 3, 1.0, &mut r);
        let layout = vec![
            RowSource::Token(0),
            RowSource::Factored {
                measure: 0,
                ordinal: 2,
            },
            RowSource::Factored {
                measure: 1,
                ordinal: 2,
            },
            RowSource::Token(5),
        ];
        fd_ok(
            &[("tok", tok.clone()), ("mea", mea.clone()), ("ord", ord.clone())],
            || {
                let table = Tensor::compose_embedding(&tok, &mea, &ord, &layout).unwrap();
                table.gather_rows(&[1, 1, 3, 0, 2]).unwrap().gelu().mean_all()
            },
        );
    }

    #[test]
    fn fd_softmax_log_exp_sigmoid() {
        let mut r = rng();
        let a = Tensor::randn_param(3, 5, 0.8, &mut r);
        fd_ok(&[("a", a.clone())], || {
            let s = a.softmax_rows().unwrap();
            // log of softmax keeps entries positive
            s.log().unwrap().mul(&a.sigmoid()).unwrap().mean_all()
        });
        fd_ok(&[("a", a.clone())], || a.exp().mean_all());
    }

    #[test]
    fn fd_layer_norm() {
        let mut r = rng();
        let x = Tensor::randn_param(4, 6, 1.5, &mut r);
        let gamma = Tensor::randn_param(1, 6, 0.5, &mut r);
        let beta = Tensor::randn_param(1, 6, 0.5, &mut r);
        fd_ok(
            &[("x", x.clone()), ("gamma", gamma.clone()), ("beta", beta.clone())],
            || x.layer_norm(&gamma, &beta, 1e-5).unwrap().gelu().mean_all(),
        );
    }

    #[test]
    fn fd_concat_and_narrow() {
        let mut r = rng();
        let a = Tensor::randn_param(2, 4, 1.0, &mut r);
        let b = Tensor::randn_param(3, 4, 1.0, &mut r);
        fd_ok(&[("a", a.clone()), ("b", b.clone())], || {
            let cat = Tensor::concat_rows(&[a.clone(), b.clone()]).unwrap();
            cat.narrow_cols(1, 2).unwrap().gelu().sum_all()
        });
    }

    #[test]
    fn fd_attention() {
        let mut r = rng();
        // 2 sequences of length 5, d_model 6, 2 heads
        let qkv = Tensor::randn_param(10, 18, 0.7, &mut r);
        let slopes = vec![0.5, 0.25];
        fd_ok(&[("qkv", qkv.clone())], || {
            Tensor::attention(&qkv, 2, 5, &slopes).unwrap().gelu().mean_all()
        });
    }

    #[test]
    fn fd_weighted_ce() {
        let mut r = rng();
        let logits = Tensor::randn_param(6, 7, 1.0, &mut r);
        let targets = vec![0, 3, 6, 2, 2, 5];
        let weights = vec![2.0, 1.0, 0.0, 0.25, 3.0, 2.0];
        fd_ok(&[("logits", logits.clone())], || {
            Tensor::weighted_cross_entropy(&logits, &targets, &weights).unwrap()
        });
    }

    #[test]
    fn fd_ziln() {
        let mut r = rng();
        let params = Tensor::randn_param(5, 3, 0.6, &mut r);
        let dts = vec![0.0, 1.5, 0.25, 0.0, 4.0];
        let valid = vec![true, true, true, false, true];
        fd_ok(&[("params", params.clone())], || {
            Tensor::ziln_nll(&params, &dts, &valid).unwrap()
        });
    }

    #[test]
    fn fd_ordinal_emd() {
        let mut r = rng();
        let logits = Tensor::randn_param(4, 12, 0.9, &mut r);
        let groups = vec![
            EmdGroup {
                row: 0,
                ids: [2, 3, 4, 5, 6],
                target_bin: 1,
            },
            EmdGroup {
                row: 2,
                ids: [7, 8, 9, 10, 11],
                target_bin: 4,
            },
        ];
        fd_ok(&[("logits", logits.clone())], || {
            Tensor::ordinal_emd(&logits, &groups).unwrap()
        });
    }

    #[test]
    fn weighted_ce_known_values() {
        // Perfect prediction: one-hot logits with huge margin -> CE ~ 0.
        let logits = Tensor::from_vec(1, 3, vec![50.0, 0.0, 0.0]).unwrap();
        let loss = Tensor::weighted_cross_entropy(&logits, &[0], &[1.0]).unwrap();
        assert!(loss.item().unwrap() < 1e-12);
        // Uniform logits -> ln V.
        let logits = Tensor::from_vec(1, 4, vec![0.0; 4]).unwrap();
        let loss = Tensor::weighted_cross_entropy(&logits, &[2], &[1.0]).unwrap();
        assert!((loss.item().unwrap() - 4.0f64.ln()).abs() < 1e-12);
        // Mixed weights: mean over count, not over weight mass.
        let logits = Tensor::from_vec(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let c = 2.0f64.ln();
        let loss = Tensor::weighted_cross_entropy(&logits, &[0, 1], &[0.25, 1.0]).unwrap();
        assert!((loss.item().unwrap() - (0.25 * c + c) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ziln_known_value() {
        // logit_z = 0, mu = 0, sigma = 1, t = 1:
        // -ln(1 - 0.5) + ln 1 + ln(1 * sqrt(2pi)) + 0 = ln 2 + 0.5 ln(2pi)
        let expect = std::f64::consts::LN_2 + 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((ziln_nll_point(0.0, 0.0, 0.0, 1.0) - expect).abs() < 1e-12);
        assert!((expect - 1.612_085_713_764_618).abs() < 1e-9);
        // t = 0 branch: -ln sigmoid(logit_z)
        assert!((ziln_nll_point(0.0, 5.0, 1.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn emd_known_values() {
        // Uniform prediction, target bin 1 (index 0): CDF (.2,.4,.6,.8,1)
        // vs (1,1,1,1,1) -> 0.8+0.6+0.4+0.2+0 = 2.0
        let logits = Tensor::from_vec(1, 5, vec![0.0; 5]).unwrap();
        let groups = vec![EmdGroup {
            row: 0,
            ids: [0, 1, 2, 3, 4],
            target_bin: 0,
        }];
        let loss = Tensor::ordinal_emd(&logits, &groups).unwrap();
        assert!((loss.item().unwrap() - 2.0).abs() < 1e-12);
        // Probability mass concentrated on the target bin -> ~0.
        let logits = Tensor::from_vec(1, 5, vec![0.0, 0.0, 50.0, 0.0, 0.0]).unwrap();
        let groups = vec![EmdGroup {
            row: 0,
            ids: [0, 1, 2, 3, 4],
            target_bin: 2,
        }];
        let loss = Tensor::ordinal_emd(&logits, &groups).unwrap();
        assert!(loss.item().unwrap() < 1e-12);
        // No ordinal targets -> 0.
        let loss = Tensor::ordinal_emd(&logits, &[]).unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
    }

    #[test]
    fn attention_is_causal() {
        // Perturbing a future token must not change earlier outputs.
        let mut r = rng();
        let data: Vec<f64> = (0..6 * 12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let qkv1 = Tensor::from_vec(6, 12, data.clone()).unwrap();
        let mut data2 = data;
        for v in &mut data2[5 * 12..] {
            *v += 1.0;
        }
        let qkv2 = Tensor::from_vec(6, 12, data2).unwrap();
        let slopes = [0.5, 0.25];
        let o1 = Tensor::attention(&qkv1, 1, 6, &slopes).unwrap().to_vec();
        let o2 = Tensor::attention(&qkv2, 1, 6, &slopes).unwrap().to_vec();
        for i in 0..5 * 4 {
            assert_eq!(o1[i], o2[i], "position before the perturbed token moved");
        }
        assert!(o1[5 * 4..] != o2[5 * 4..]);
    }

    #[test]
    fn attention_batch_sequences_are_independent() {
        let mut r = rng();
        let a: Vec<f64> = (0..4 * 6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4 * 6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let joint = Tensor::from_vec(8, 6, a.iter().chain(&b).cloned().collect()).unwrap();
        let solo = Tensor::from_vec(4, 6, a.clone()).unwrap();
        let slopes = [0.5];
        let j = Tensor::attention(&joint, 2, 4, &slopes).unwrap().to_vec();
        let s = Tensor::attention(&solo, 1, 4, &slopes).unwrap().to_vec();
        assert_eq!(&j[..4 * 2], &s[..]);
    }
}
