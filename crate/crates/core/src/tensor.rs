//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value lives on a [`Tape`]: building an op records a [`Tensor`] node,
//! and [`Tape::backward`] replays the record in reverse order, accumulating
//! gradients into each node. Tensors are rank-2, row-major; scalars are 1x1.
//! Repeated `backward` calls accumulate further (useful for summed losses);
//! call [`Tape::clear_grads`] to reset.

use thiserror::Error;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("{op}: data length {len} does not match shape {rows}x{cols}")]
    DataLength {
        op: &'static str,
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{op}: index {index} out of range for shape {rows}x{cols}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("{op}: value {value} must be strictly positive")]
    NonPositive { op: &'static str, value: f64 },
    #[error("backward root must be a scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("{op}: requires at least one input")]
    EmptyInput { op: &'static str },
}

/// Inputs to `log_clamped` below this floor are treated as exactly this value,
/// so `ln` stays finite on probabilities that underflowed to zero.
const LOG_CLAMP_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    Sigmoid { a: TensorId },
    Tanh { a: TensorId },
    SoftmaxRows { a: TensorId, temp: f64 },
    LogSoftmaxRows { a: TensorId },
    LogClamped { a: TensorId },
    Row { a: TensorId, index: usize },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize },
    ConcatCols { a: TensorId, b: TensorId },
    StackRows { parts: Vec<TensorId> },
    RepeatRows { a: TensorId, count: usize },
    SumAll { a: TensorId },
    NllRowsMean { a: TensorId, labels: Vec<usize> },
    OuterRowSum { a: TensorId, b: TensorId },
    /// Scalar loss whose input gradient was derived analytically during the
    /// forward pass (used by the lattice losses, where the backward recursion
    /// is cheaper and better conditioned than tracing the DP op by op).
    LossWithGrad { a: TensorId, grad: Vec<f64> },
}

/// One node on the tape: a value plus how it was computed.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    op: Op,
}

/// Operation record. Indices returned by ops are stable for the tape lifetime.
#[derive(Debug, Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let t = &self.tensors[id.0];
        (t.rows, t.cols)
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    /// Drops all accumulated gradients, keeping values and the op record.
    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    fn push(
        &mut self,
        data: Vec<f64>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        debug_assert_eq!(data.len(), rows * cols);
        self.tensors.push(Tensor {
            data,
            rows,
            cols,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.tensors.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    // ── Node constructors ───────────────────────────────────────────────

    pub fn leaf(
        &mut self,
        data: Vec<f64>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                op: "leaf",
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(self.push(data, rows, cols, requires_grad, Op::Leaf))
    }

    /// Constant scalar node.
    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], 1, 1, false, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize, requires_grad: bool) -> TensorId {
        self.push(vec![0.0; rows * cols], rows, cols, requires_grad, Op::Leaf)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs_rows: m,
                lhs_cols: ka,
                rhs_rows: kb,
                rhs_cols: n,
            });
        }
        let mut out = vec![0.0; m * n];
        mm(self.value(a), self.value(b), m, ka, n, &mut out);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, m, n, rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.needs(a);
        self.push(out, c, r, rg, Op::Transpose { a })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs_rows: ra,
                lhs_cols: ca,
                rhs_rows: rb,
                rhs_cols: cb,
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, ra, ca, rg, op))
    }

    /// Multiplies every entry by the constant `c` (the only broadcast form).
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (r, cl) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.needs(a);
        self.push(out, r, cl, rg, Op::Scale { a, c })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let rg = self.needs(a);
        self.push(out, r, c, rg, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.needs(a);
        self.push(out, r, c, rg, Op::Tanh { a })
    }

    /// Row-wise `softmax(x / temp)`. Rows sum to 1 up to rounding.
    pub fn softmax_rows(&mut self, a: TensorId, temp: f64) -> Result<TensorId, TensorError> {
        if !(temp.is_finite() && temp > 0.0) {
            return Err(TensorError::NonPositive {
                op: "softmax_rows temperature",
                value: temp,
            });
        }
        let (r, c) = self.shape(a);
        if self.value(a).iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.value(a)[i * c..(i + 1) * c];
            let hi = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / temp));
            let dst = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x / temp - hi).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let rg = self.needs(a);
        Ok(self.push(out, r, c, rg, Op::SoftmaxRows { a, temp }))
    }

    /// Row-wise `x - logsumexp(x)`, computed with a max shift.
    pub fn log_softmax_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(a);
        if self.value(a).iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "log_softmax_rows",
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.value(a)[i * c..(i + 1) * c];
            let hi = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = hi + row.iter().map(|&x| (x - hi).exp()).sum::<f64>().ln();
            for (d, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *d = x - lse;
            }
        }
        let rg = self.needs(a);
        Ok(self.push(out, r, c, rg, Op::LogSoftmaxRows { a }))
    }

    /// Entrywise `ln(max(x, 1e-300))` for nonnegative inputs. Entries at or
    /// below the floor get zero gradient.
    pub fn log_clamped(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(a);
        for &x in self.value(a) {
            if !x.is_finite() {
                return Err(TensorError::NonFinite { op: "log_clamped" });
            }
            if x < 0.0 {
                return Err(TensorError::NonPositive {
                    op: "log_clamped",
                    value: x,
                });
            }
        }
        let out = self
            .value(a)
            .iter()
            .map(|&x| x.max(LOG_CLAMP_FLOOR).ln())
            .collect();
        let rg = self.needs(a);
        Ok(self.push(out, r, c, rg, Op::LogClamped { a }))
    }

    /// Single row `index` as a 1xC tensor.
    pub fn row(&mut self, a: TensorId, index: usize) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(a);
        if index >= r {
            return Err(TensorError::IndexOutOfRange {
                op: "row",
                index,
                rows: r,
                cols: c,
            });
        }
        let out = self.value(a)[index * c..(index + 1) * c].to_vec();
        let rg = self.needs(a);
        Ok(self.push(out, 1, c, rg, Op::Row { a, index }))
    }

    pub fn slice_rows(
        &mut self,
        a: TensorId,
        start: usize,
        count: usize,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(a);
        if start + count > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + count,
                rows: r,
                cols: c,
            });
        }
        let out = self.value(a)[start * c..(start + count) * c].to_vec();
        let rg = self.needs(a);
        Ok(self.push(out, count, c, rg, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        count: usize,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(a);
        if start + count > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + count,
                rows: r,
                cols: c,
            });
        }
        let mut out = Vec::with_capacity(r * count);
        for i in 0..r {
            out.extend_from_slice(&self.value(a)[i * c + start..i * c + start + count]);
        }
        let rg = self.needs(a);
        Ok(self.push(out, r, count, rg, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs_rows: ra,
                lhs_cols: ca,
                rhs_rows: rb,
                rhs_cols: cb,
            });
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&self.value(a)[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.value(b)[i * cb..(i + 1) * cb]);
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, ra, ca + cb, rg, Op::ConcatCols { a, b }))
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn stack_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::EmptyInput { op: "stack_rows" });
        };
        let (_, c) = self.shape(first);
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (rp, cp) = self.shape(p);
            if cp != c {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs_rows: rows,
                    lhs_cols: c,
                    rhs_rows: rp,
                    rhs_cols: cp,
                });
            }
            out.extend_from_slice(self.value(p));
            rows += rp;
            rg |= self.needs(p);
        }
        Ok(self.push(out, rows, c, rg, Op::StackRows { parts: parts.to_vec() }))
    }

    /// Tiles a 1xC row `count` times (explicit form of a row broadcast).
    pub fn repeat_rows(&mut self, a: TensorId, count: usize) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "repeat_rows",
                lhs_rows: r,
                lhs_cols: c,
                rhs_rows: 1,
                rhs_cols: c,
            });
        }
        let mut out = Vec::with_capacity(count * c);
        for _ in 0..count {
            out.extend_from_slice(self.value(a));
        }
        let rg = self.needs(a);
        Ok(self.push(out, count, c, rg, Op::RepeatRows { a, count }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.needs(a);
        self.push(vec![s], 1, 1, rg, Op::SumAll { a })
    }

    /// Mean over rows of `-ln a[r][labels[r]]`; an empty label list gives 0.
    pub fn nll_rows_mean(
        &mut self,
        a: TensorId,
        labels: &[usize],
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.shape(a);
        if labels.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "nll_rows_mean",
                lhs_rows: r,
                lhs_cols: c,
                rhs_rows: labels.len(),
                rhs_cols: 1,
            });
        }
        let mut total = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            if lab >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll_rows_mean",
                    index: lab,
                    rows: r,
                    cols: c,
                });
            }
            let v = self.value(a)[i * c + lab];
            if !(v > 0.0) {
                return Err(TensorError::NonPositive {
                    op: "nll_rows_mean",
                    value: v,
                });
            }
            total -= v.ln();
        }
        let mean = if labels.is_empty() {
            0.0
        } else {
            total / labels.len() as f64
        };
        let rg = self.needs(a);
        Ok(self.push(
            vec![mean],
            1,
            1,
            rg,
            Op::NllRowsMean {
                a,
                labels: labels.to_vec(),
            },
        ))
    }

    /// All pairwise row sums: for `a` (RaxC) and `b` (RbxC) the output row
    /// `i*Rb + j` is `a[i] + b[j]`. This is how a transducer joint combines
    /// every encoder frame with every predictor state in one node.
    pub fn outer_row_sum(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(TensorError::ShapeMismatch {
                op: "outer_row_sum",
                lhs_rows: ra,
                lhs_cols: ca,
                rhs_rows: rb,
                rhs_cols: cb,
            });
        }
        let mut out = Vec::with_capacity(ra * rb * ca);
        for i in 0..ra {
            let arow = &self.value(a)[i * ca..(i + 1) * ca];
            for j in 0..rb {
                let brow = &self.value(b)[j * cb..(j + 1) * cb];
                out.extend(arow.iter().zip(brow).map(|(&x, &y)| x + y));
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, ra * rb, ca, rg, Op::OuterRowSum { a, b }))
    }

    /// Records a scalar loss whose gradient with respect to `a` was computed
    /// analytically by the caller. `grad` must have `a`'s element count.
    pub(crate) fn loss_with_grad(
        &mut self,
        a: TensorId,
        value: f64,
        grad: Vec<f64>,
    ) -> TensorId {
        debug_assert_eq!(grad.len(), self.value(a).len());
        let rg = self.needs(a);
        self.push(vec![value], 1, 1, rg, Op::LossWithGrad { a, grad })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulates `d root / d node` into every node reachable from `root`
    /// that requires a gradient. The root must be scalar. Each call adds one
    /// unit of root sensitivity, so repeated calls accumulate linearly.
    pub fn backward(&mut self, root: TensorId) -> Result<(), TensorError> {
        let rt = &self.tensors[root.0];
        if rt.data.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                rows: rt.rows,
                cols: rt.cols,
            });
        }
        if !rt.requires_grad {
            return Ok(());
        }
        // Per-call upstream buffers, kept apart from the persistent grads so
        // a second backward never re-propagates already-stored gradient.
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            {
                let t = &mut self.tensors[i];
                let len = t.data.len();
                let stored = t.grad.get_or_insert_with(|| vec![0.0; len]);
                for (s, &gv) in stored.iter_mut().zip(&g) {
                    *s += gv;
                }
            }
            let op = std::mem::replace(&mut self.tensors[i].op, Op::Leaf);
            self.backprop_node(i, &g, &op, &mut pending);
            self.tensors[i].op = op;
        }
        Ok(())
    }

    fn backprop_node(&self, node: usize, g: &[f64], op: &Op, pending: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    mm_nt(g, self.value(*b), m, n, k, &mut da);
                    self.acc(pending, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    mm_tn(self.value(*a), g, m, k, n, &mut db);
                    self.acc(pending, *b, &db);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = self.shape(*a);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                self.acc(pending, *a, &da);
            }
            Op::Add { a, b } => {
                self.acc(pending, *a, g);
                self.acc(pending, *b, g);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(&gi, &bv)| gi * bv).collect();
                    self.acc(pending, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(&gi, &av)| gi * av).collect();
                    self.acc(pending, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
                self.acc(pending, *a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[node].data)
                    .map(|(&gi, &y)| gi * y * (1.0 - y))
                    .collect();
                self.acc(pending, *a, &da);
            }
            Op::Tanh { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[node].data)
                    .map(|(&gi, &y)| gi * (1.0 - y * y))
                    .collect();
                self.acc(pending, *a, &da);
            }
            Op::SoftmaxRows { a, temp } => {
                let (r, c) = self.shape(*a);
                let y = &self.tensors[node].data;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                    for ((d, &yv), &gv) in da[i * c..(i + 1) * c].iter_mut().zip(ys).zip(gs) {
                        *d = yv * (gv - dot) / temp;
                    }
                }
                self.acc(pending, *a, &da);
            }
            Op::LogSoftmaxRows { a } => {
                let (r, c) = self.shape(*a);
                let y = &self.tensors[node].data;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let gsum: f64 = gs.iter().sum();
                    for ((d, &yv), &gv) in da[i * c..(i + 1) * c].iter_mut().zip(ys).zip(gs) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                self.acc(pending, *a, &da);
            }
            Op::LogClamped { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(&gi, &x)| if x >= LOG_CLAMP_FLOOR { gi / x } else { 0.0 })
                    .collect();
                self.acc(pending, *a, &da);
            }
            Op::Row { a, index } => {
                let (r, c) = self.shape(*a);
                let mut da = vec![0.0; r * c];
                da[index * c..(index + 1) * c].copy_from_slice(g);
                self.acc(pending, *a, &da);
            }
            Op::SliceRows { a, start } => {
                let (r, c) = self.shape(*a);
                let mut da = vec![0.0; r * c];
                da[start * c..start * c + g.len()].copy_from_slice(g);
                self.acc(pending, *a, &da);
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.shape(*a);
                let cg = self.tensors[node].cols;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + cg].copy_from_slice(&g[i * cg..(i + 1) * cg]);
                }
                self.acc(pending, *a, &da);
            }
            Op::ConcatCols { a, b } => {
                let (r, ca) = self.shape(*a);
                let (_, cb) = self.shape(*b);
                let cg = ca + cb;
                if self.needs(*a) {
                    let mut da = vec![0.0; r * ca];
                    for i in 0..r {
                        da[i * ca..(i + 1) * ca].copy_from_slice(&g[i * cg..i * cg + ca]);
                    }
                    self.acc(pending, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; r * cb];
                    for i in 0..r {
                        db[i * cb..(i + 1) * cb].copy_from_slice(&g[i * cg + ca..(i + 1) * cg]);
                    }
                    self.acc(pending, *b, &db);
                }
            }
            Op::StackRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let (rp, cp) = self.shape(p);
                    let span = &g[offset..offset + rp * cp];
                    if self.needs(p) {
                        let dp = span.to_vec();
                        self.acc(pending, p, &dp);
                    }
                    offset += rp * cp;
                }
            }
            Op::RepeatRows { a, count } => {
                let (_, c) = self.shape(*a);
                let mut da = vec![0.0; c];
                for i in 0..*count {
                    for (d, &gv) in da.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *d += gv;
                    }
                }
                self.acc(pending, *a, &da);
            }
            Op::SumAll { a } => {
                let (r, c) = self.shape(*a);
                let da = vec![g[0]; r * c];
                self.acc(pending, *a, &da);
            }
            Op::NllRowsMean { a, labels } => {
                if labels.is_empty() {
                    return;
                }
                let (r, c) = self.shape(*a);
                let m = labels.len() as f64;
                let mut da = vec![0.0; r * c];
                for (i, &lab) in labels.iter().enumerate() {
                    da[i * c + lab] = -g[0] / (m * self.value(*a)[i * c + lab]);
                }
                self.acc(pending, *a, &da);
            }
            Op::OuterRowSum { a, b } => {
                let (ra, c) = self.shape(*a);
                let (rb, _) = self.shape(*b);
                if self.needs(*a) {
                    let mut da = vec![0.0; ra * c];
                    for i in 0..ra {
                        for j in 0..rb {
                            let gr = &g[(i * rb + j) * c..(i * rb + j + 1) * c];
                            for (d, &gv) in da[i * c..(i + 1) * c].iter_mut().zip(gr) {
                                *d += gv;
                            }
                        }
                    }
                    self.acc(pending, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; rb * c];
                    for i in 0..ra {
                        for j in 0..rb {
                            let gr = &g[(i * rb + j) * c..(i * rb + j + 1) * c];
                            for (d, &gv) in db[j * c..(j + 1) * c].iter_mut().zip(gr) {
                                *d += gv;
                            }
                        }
                    }
                    self.acc(pending, *b, &db);
                }
            }
            Op::LossWithGrad { a, grad } => {
                let da: Vec<f64> = grad.iter().map(|&gi| gi * g[0]).collect();
                self.acc(pending, *a, &da);
            }
        }
    }

    fn acc(&self, pending: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        let t = &self.tensors[id.0];
        if !t.requires_grad {
            return;
        }
        let buf = pending[id.0].get_or_insert_with(|| vec![0.0; t.data.len()]);
        for (b, &d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }
}

// ── Matmul kernels ──────────────────────────────────────────────────────

/// `out += a(mxk) * b(kxn)`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ap * bv;
            }
        }
    }
}

/// `out += g(mxn) * b(kxn)^T`, the `dA` of a matmul backward.
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a(mxk)^T * g(mxn)`, the `dB` of a matmul backward.
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += ap * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randvec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    /// Checks tape gradients of a scalar-valued build against central
    /// differences over `seeds` random inputs.
    fn fd_check(
        n: usize,
        seeds: std::ops::Range<u64>,
        lo: f64,
        hi: f64,
        build: impl Fn(&mut Tape, Vec<f64>) -> (TensorId, TensorId),
    ) {
        for seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randvec(&mut rng, n, lo, hi);

            let mut tape = Tape::new();
            let (root, leaf) = build(&mut tape, x.clone());
            tape.backward(root).unwrap();
            let analytic = tape.grad(leaf).unwrap().to_vec();

            let numeric = gradcheck::central_difference(
                |xs| {
                    let mut t = Tape::new();
                    let (r, _) = build(&mut t, xs.to_vec());
                    t.value(r)[0]
                },
                &x,
                gradcheck::STEP,
            );
            gradcheck::compare(&analytic, &numeric)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn matmul_known_product() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], 2, 2, false).unwrap();
        let b = t.leaf(vec![5.0, 6.0, 7.0, 8.0], 2, 2, false).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.zeros(2, 3, false);
        let b = t.zeros(2, 2, false);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn log_softmax_survives_extreme_logits() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1000.0, 0.0], 1, 2, false).unwrap();
        let y = t.log_softmax_rows(a).unwrap();
        let v = t.value(y);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(v[0].abs() < 1e-12, "got {}", v[0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..5,
            cols in 1usize..7,
            seed in any::<u64>(),
            temp in 0.25f64..8.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new();
            let data = randvec(&mut rng, rows * cols, -50.0, 50.0);
            let a = t.leaf(data, rows, cols, false).unwrap();
            let y = t.softmax_rows(a, temp).unwrap();
            for i in 0..rows {
                let s: f64 = t.value(y)[i * cols..(i + 1) * cols].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut t = Tape::new();
        let a = t.leaf(vec![f64::NAN, 0.0], 1, 2, false).unwrap();
        assert!(t.softmax_rows(a, 1.0).is_err());
        assert!(t.log_softmax_rows(a).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let a = t.zeros(2, 2, true);
        match t.backward(a) {
            Err(TensorError::NonScalarRoot { rows: 2, cols: 2 }) => {}
            other => panic!("expected NonScalarRoot, got {other:?}"),
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0], 1, 2, true).unwrap();
        let s = t.sum_all(a);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 1.0]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[2.0, 2.0]);
        t.clear_grads();
        assert!(t.grad(a).is_none());
    }

    #[test]
    fn shared_subexpression_grad_equals_expanded_graph() {
        let x = vec![0.3, -0.7, 1.1, 0.4];
        let c1 = vec![0.5, -1.0, 2.0, 0.25];
        let c2 = vec![-0.75, 0.5, 1.5, -2.0];

        // Shared: s = sigmoid(x) consumed by two branches.
        let mut t = Tape::new();
        let xs = t.leaf(x.clone(), 2, 2, true).unwrap();
        let s = t.sigmoid(xs);
        let a = t.leaf(c1.clone(), 2, 2, false).unwrap();
        let b = t.leaf(c2.clone(), 2, 2, false).unwrap();
        let p1 = t.mul(s, a).unwrap();
        let p2 = t.mul(s, b).unwrap();
        let sum = t.add(p1, p2).unwrap();
        let root = t.sum_all(sum);
        t.backward(root).unwrap();
        let shared = t.grad(xs).unwrap().to_vec();

        // Expanded: each branch gets its own sigmoid node.
        let mut t = Tape::new();
        let xs = t.leaf(x, 2, 2, true).unwrap();
        let s1 = t.sigmoid(xs);
        let s2 = t.sigmoid(xs);
        let a = t.leaf(c1, 2, 2, false).unwrap();
        let b = t.leaf(c2, 2, 2, false).unwrap();
        let p1 = t.mul(s1, a).unwrap();
        let p2 = t.mul(s2, b).unwrap();
        let sum = t.add(p1, p2).unwrap();
        let root = t.sum_all(sum);
        t.backward(root).unwrap();
        let expanded = t.grad(xs).unwrap().to_vec();

        // Summation order differs between the two graphs, so allow rounding.
        for (s, e) in shared.iter().zip(&expanded) {
            assert!((s - e).abs() <= 1e-12, "{s} vs {e}");
        }
    }

    #[test]
    fn fd_matmul_and_transpose() {
        fd_check(6, 0..20, -2.0, 2.0, |t, x| {
            let a = t.leaf(x, 2, 3, true).unwrap();
            let at = t.transpose(a);
            let m = t.matmul(a, at).unwrap();
            (t.sum_all(m), a)
        });
    }

    #[test]
    fn fd_elementwise_ops() {
        fd_check(4, 0..20, -2.0, 2.0, |t, x| {
            let a = t.leaf(x, 2, 2, true).unwrap();
            let c = t.leaf(vec![0.5, -1.5, 2.0, 0.2], 2, 2, false).unwrap();
            let s = t.sigmoid(a);
            let h = t.tanh(a);
            let m = t.mul(s, h).unwrap();
            let m = t.add(m, c).unwrap();
            let m = t.mul(m, a).unwrap();
            let sc = t.scale(m, -0.7);
            (t.sum_all(sc), a)
        });
    }

    #[test]
    fn fd_softmax_and_log_softmax() {
        fd_check(6, 0..20, -3.0, 3.0, |t, x| {
            let a = t.leaf(x, 2, 3, true).unwrap();
            let w = t.leaf(vec![1.0, -2.0, 0.5, 0.3, 1.7, -0.9], 2, 3, false).unwrap();
            let sm = t.softmax_rows(a, 2.0).unwrap();
            let lsm = t.log_softmax_rows(a).unwrap();
            let p1 = t.mul(sm, w).unwrap();
            let p2 = t.mul(lsm, w).unwrap();
            let s = t.add(p1, p2).unwrap();
            (t.sum_all(s), a)
        });
    }

    #[test]
    fn fd_log_clamped_and_nll() {
        fd_check(6, 0..20, 0.05, 3.0, |t, x| {
            let a = t.leaf(x, 2, 3, true).unwrap();
            let l = t.log_clamped(a).unwrap();
            let s1 = t.sum_all(l);
            let s2 = t.nll_rows_mean(a, &[2, 0]).unwrap();
            let s = t.add(s1, s2).unwrap();
            (t.sum_all(s), a)
        });
    }

    #[test]
    fn fd_row_and_slice_ops() {
        fd_check(12, 0..20, -2.0, 2.0, |t, x| {
            let a = t.leaf(x, 3, 4, true).unwrap();
            let r1 = t.row(a, 1).unwrap();
            let sr = t.slice_rows(a, 1, 2).unwrap();
            let sc = t.slice_cols(sr, 1, 2).unwrap();
            let cc = t.concat_cols(sr, sc).unwrap();
            let st = t.stack_rows(&[r1, r1]).unwrap();
            let rep = t.repeat_rows(r1, 2).unwrap();
            let s1 = t.sum_all(cc);
            let s2 = t.sum_all(st);
            let s3 = t.sum_all(rep);
            let q = t.add(s1, s2).unwrap();
            let q = t.add(q, s3).unwrap();
            (q, a)
        });
    }

    #[test]
    fn fd_outer_row_sum() {
        fd_check(6, 0..20, -2.0, 2.0, |t, x| {
            let a = t.leaf(x, 2, 3, true).unwrap();
            let b = t.leaf(vec![0.2, -0.4, 1.0, 0.8, -1.2, 0.1], 2, 3, false).unwrap();
            let o = t.outer_row_sum(a, b).unwrap();
            let o = t.tanh(o);
            (t.sum_all(o), a)
        });
    }

    #[test]
    fn fd_outer_row_sum_second_argument() {
        fd_check(6, 0..20, -2.0, 2.0, |t, x| {
            let b = t.leaf(x, 2, 3, true).unwrap();
            let a = t.leaf(vec![0.2, -0.4, 1.0, 0.8, -1.2, 0.1], 2, 3, false).unwrap();
            let o = t.outer_row_sum(a, b).unwrap();
            let o = t.sigmoid(o);
            (t.sum_all(o), b)
        });
    }

    #[test]
    fn tensors_are_send_and_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Tensor>();
        assert_send_sync::<Tape>();
    }
}
