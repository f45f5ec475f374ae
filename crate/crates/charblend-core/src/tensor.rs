//! Dense f64 matrices and a dynamic tape for reverse-mode differentiation.
//!
//! Every operation the models need has an explicit forward and backward
//! rule here. A [`Tape`] is rebuilt for each sequence (lengths vary per
//! example), owns all intermediate values, and replays its ops in reverse
//! to accumulate gradients. Gradients accumulate additively across fan-out.
//!
//! Shapes are rank-2 only and never broadcast: every coercion is explicit,
//! which keeps the hand-written backward passes honest.

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data. Panics if `data.len() != rows*cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// 1xN row vector.
    pub fn row_vec(data: Vec<f64>) -> Self {
        Matrix {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a 1x1 matrix.
    pub fn scalar(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── Raw kernels shared by forward and backward ───────────────────────

/// out += a(m x k) · b(k x n), row-major.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out += a(m x k) · b(n x k)ᵀ, row-major. out is m x n.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// dst(r x c) += x ⊗ y.
fn add_outer(dst: &mut [f64], x: &[f64], y: &[f64]) {
    let c = y.len();
    for (a, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = &mut dst[a * c..(a + 1) * c];
        for (d, &yv) in row.iter_mut().zip(y) {
            *d += xv * yv;
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stable softmax of a slice (max-subtraction), written into `out`.
fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// c = a · b
    Matmul { a: Value, b: Value },
    /// c = a · bᵀ
    MatmulNt { a: Value, b: Value },
    Add { a: Value, b: Value },
    /// Elementwise product.
    Mul { a: Value, b: Value },
    Tanh { x: Value },
    Sigmoid { x: Value },
    /// Row-wise stable softmax of a 1xN input.
    SoftmaxRow { x: Value },
    /// -log p[target] on an existing distribution.
    CrossEntropy { p: Value, target: usize },
    /// Fused softmax + cross-entropy on raw logits.
    SoftmaxCrossEntropy { logits: Value, target: usize },
    /// Horizontal concatenation of equal-height blocks.
    ConcatCols { parts: Vec<Value> },
    /// Contiguous column range.
    SliceCols { x: Value, start: usize, len: usize },
    /// Vertical stack of 1xN rows.
    StackRows { parts: Vec<Value> },
    /// Single-row lookup out of a table; backward scatters into that row.
    RowLookup { table: Value, index: usize },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Dynamic Wengert tape. Records every op during the forward pass and
/// replays them in reverse on [`Tape::backward`]. Single-owner and
/// single-threaded; independent tapes may run on distinct threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    ran_backward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Value {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Value(id)
    }

    /// Register an input or parameter as a differentiable leaf.
    pub fn leaf(&mut self, m: Matrix) -> Value {
        self.push(m, Op::Leaf)
    }

    pub fn value(&self, v: Value) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the loss w.r.t. `v`. `None` when no
    /// gradient flowed to it (or before `backward`).
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn shape_err(&self, op: &'static str, a: Value, b: Value) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape_str(),
            rhs: self.value(b).shape_str(),
        }
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (am, ak) = (self.value(a).rows, self.value(a).cols);
        let (bk, bn) = (self.value(b).rows, self.value(b).cols);
        if ak != bk {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; am * bn];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            am,
            ak,
            bn,
            &mut out,
        );
        Ok(self.push(Matrix::from_vec(am, bn, out), Op::Matmul { a, b }))
    }

    /// a · bᵀ. `a` is m x k, `b` is n x k, result m x n.
    pub fn matmul_nt(&mut self, a: Value, b: Value) -> Result<Value> {
        let (am, ak) = (self.value(a).rows, self.value(a).cols);
        let (bn, bk) = (self.value(b).rows, self.value(b).cols);
        if ak != bk {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; am * bn];
        matmul_nt_acc(
            self.value(a).data(),
            self.value(b).data(),
            am,
            ak,
            bn,
            &mut out,
        );
        Ok(self.push(Matrix::from_vec(am, bn, out), Op::MatmulNt { a, b }))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.value(a).rows != self.value(b).rows || self.value(a).cols != self.value(b).cols {
            return Err(self.shape_err("add", a, b));
        }
        let m = Matrix::from_vec(
            self.value(a).rows,
            self.value(a).cols,
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        Ok(self.push(m, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.value(a).rows != self.value(b).rows || self.value(a).cols != self.value(b).cols {
            return Err(self.shape_err("mul", a, b));
        }
        let m = Matrix::from_vec(
            self.value(a).rows,
            self.value(a).cols,
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        );
        Ok(self.push(m, Op::Mul { a, b }))
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        let m = Matrix::from_vec(
            self.value(x).rows,
            self.value(x).cols,
            self.value(x).data().iter().map(|v| v.tanh()).collect(),
        );
        self.push(m, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        let m = Matrix::from_vec(
            self.value(x).rows,
            self.value(x).cols,
            self.value(x)
                .data()
                .iter()
                .map(|&v| sigmoid_scalar(v))
                .collect(),
        );
        self.push(m, Op::Sigmoid { x })
    }

    /// Stable softmax over a 1xN row.
    pub fn softmax_row(&mut self, x: Value) -> Result<Value> {
        let v = self.value(x);
        if v.rows != 1 || v.cols == 0 {
            return Err(Error::Shape {
                op: "softmax_row",
                lhs: v.shape_str(),
                rhs: "1xN (N >= 1)".into(),
            });
        }
        let mut out = vec![0.0; v.cols];
        softmax_into(v.data(), &mut out);
        let m = Matrix::row_vec(out);
        Ok(self.push(m, Op::SoftmaxRow { x }))
    }

    /// `-log p[target]` with the probability clamped at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, p: Value, target: usize) -> Result<Value> {
        let v = self.value(p);
        if v.rows != 1 || v.cols == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: v.shape_str(),
                rhs: "1xN (N >= 1)".into(),
            });
        }
        if target >= v.cols {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: target,
                len: v.cols,
            });
        }
        let loss = -v.data()[target].max(PROB_FLOOR).ln();
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy { p, target },
        ))
    }

    /// Fused stable softmax + cross-entropy: `-log softmax(logits)[target]`.
    /// Backward is the combined gradient `p - onehot(target)`.
    pub fn softmax_cross_entropy(&mut self, logits: Value, target: usize) -> Result<Value> {
        let v = self.value(logits);
        if v.rows != 1 || v.cols == 0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: v.shape_str(),
                rhs: "1xN (N >= 1)".into(),
            });
        }
        if target >= v.cols {
            return Err(Error::Index {
                what: "softmax_cross_entropy target",
                index: target,
                len: v.cols,
            });
        }
        let x = v.data();
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - x[target];
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::SoftmaxCrossEntropy { logits, target },
        ))
    }

    /// Horizontal concatenation; every part must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.value(parts[0]).rows;
        for &p in parts {
            if self.value(p).rows != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let pm = self.value(p);
            for r in 0..rows {
                let dst = &mut data[r * cols + offset..r * cols + offset + pm.cols];
                dst.copy_from_slice(pm.row(r));
            }
            offset += pm.cols;
        }
        Ok(self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Contiguous column range [start, start+len).
    pub fn slice_cols(&mut self, x: Value, start: usize, len: usize) -> Result<Value> {
        let v = self.value(x);
        if start + len > v.cols || len == 0 {
            return Err(Error::Index {
                what: "slice_cols range end",
                index: start + len,
                len: v.cols,
            });
        }
        let rows = v.rows;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        Ok(self.push(
            Matrix::from_vec(rows, len, data),
            Op::SliceCols { x, start, len },
        ))
    }

    /// Stack 1xN rows into an MxN matrix.
    pub fn stack_rows(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_rows of zero parts".into()));
        }
        let cols = self.value(parts[0]).cols;
        for &p in parts {
            let v = self.value(p);
            if v.rows != 1 || v.cols != cols {
                return Err(self.shape_err("stack_rows", parts[0], p));
            }
        }
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Matrix::from_vec(parts.len(), cols, data),
            Op::StackRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Row `index` of a table as a 1xN value (embedding lookup).
    pub fn row(&mut self, table: Value, index: usize) -> Result<Value> {
        let v = self.value(table);
        if index >= v.rows {
            return Err(Error::Index {
                what: "table row",
                index,
                len: v.rows,
            });
        }
        let data = v.row(index).to_vec();
        Ok(self.push(Matrix::row_vec(data), Op::RowLookup { table, index }))
    }

    fn grad_or_zeros(&mut self, v: Value) -> &mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&mut self, v: Value, g: &[f64]) {
        let dst = self.grad_or_zeros(v);
        debug_assert_eq!(dst.len(), g.len());
        for (d, &x) in dst.iter_mut().zip(g) {
            *d += x;
        }
    }

    /// Reverse pass from a scalar loss. May be invoked once per tape,
    /// only after the forward construction is complete.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {}",
                self.value(loss).shape_str()
            )));
        }
        if self.ran_backward {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        self.ran_backward = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            let out_grad = match &self.grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.value(a).rows, self.value(a).cols);
                    let n = self.value(b).cols;
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(&out_grad, self.value(b).data(), m, n, k, &mut da);
                    // dB = Aᵀ · dC, accumulated row by row as outer products
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let a_row = self.value(a).row(i).to_vec();
                        add_outer(&mut db, &a_row, &out_grad[i * n..(i + 1) * n]);
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MatmulNt { a, b } => {
                    let (m, k) = (self.value(a).rows, self.value(a).cols);
                    let n = self.value(b).rows;
                    // dA = dC · B
                    let mut da = vec![0.0; m * k];
                    matmul_acc(&out_grad, self.value(b).data(), m, n, k, &mut da);
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        let a_row = self.value(a).row(i).to_vec();
                        add_outer(&mut db, &out_grad[i * n..(i + 1) * n], &a_row);
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &out_grad);
                    self.accumulate(b, &out_grad);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = out_grad
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    let db: Vec<f64> = out_grad
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Tanh { x } => {
                    let dx: Vec<f64> = out_grad
                        .iter()
                        .zip(self.nodes[id].value.data())
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Sigmoid { x } => {
                    let dx: Vec<f64> = out_grad
                        .iter()
                        .zip(self.nodes[id].value.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxRow { x } => {
                    let y = self.nodes[id].value.data();
                    let dot: f64 = out_grad.iter().zip(y).map(|(g, v)| g * v).sum();
                    let dx: Vec<f64> = out_grad
                        .iter()
                        .zip(y)
                        .map(|(g, v)| v * (g - dot))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::CrossEntropy { p, target } => {
                    let pt = self.value(p).data()[target].max(PROB_FLOOR);
                    let mut dp = vec![0.0; self.value(p).len()];
                    dp[target] = -out_grad[0] / pt;
                    self.accumulate(p, &dp);
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    let x = self.value(logits).data();
                    let mut dl = vec![0.0; x.len()];
                    softmax_into(x, &mut dl);
                    dl[target] -= 1.0;
                    for v in dl.iter_mut() {
                        *v *= out_grad[0];
                    }
                    self.accumulate(logits, &dl);
                }
                Op::ConcatCols { parts } => {
                    let rows = self.nodes[id].value.rows;
                    let cols = self.nodes[id].value.cols;
                    let mut offset = 0;
                    for &p in &parts {
                        let pc = self.value(p).cols;
                        let mut dp = vec![0.0; rows * pc];
                        for r in 0..rows {
                            dp[r * pc..(r + 1) * pc]
                                .copy_from_slice(&out_grad[r * cols + offset..r * cols + offset + pc]);
                        }
                        self.accumulate(p, &dp);
                        offset += pc;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (rows, cols) = (self.value(x).rows, self.value(x).cols);
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&out_grad[r * len..(r + 1) * len]);
                    }
                    self.accumulate(x, &dx);
                }
                Op::StackRows { parts } => {
                    let cols = self.nodes[id].value.cols;
                    for (r, &p) in parts.iter().enumerate() {
                        self.accumulate(p, &out_grad[r * cols..(r + 1) * cols]);
                    }
                }
                Op::RowLookup { table, index } => {
                    let (rows, cols) = (self.value(table).rows, self.value(table).cols);
                    let mut dt = vec![0.0; rows * cols];
                    dt[index * cols..(index + 1) * cols].copy_from_slice(&out_grad);
                    self.accumulate(table, &dt);
                }
            }
        }
        Ok(())
    }
}

// ── Finite-difference gradient checking ──────────────────────────────

/// Compare analytic gradients against central finite differences.
///
/// `build` constructs a scalar loss from leaves registered for each
/// parameter matrix; it is re-invoked on perturbed copies for the
/// numerical side. Returns the worst relative error
/// |g_a - g_n| / max(1e-8, |g_a| + |g_n|) over every parameter entry
/// (0.0 when `params` is empty).
#[allow(clippy::needless_range_loop)]
pub fn grad_check<F>(params: &[Matrix], epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    if epsilon <= 0.0 {
        return Err(Error::Contract("grad_check epsilon must be positive".into()));
    }

    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vals: Vec<Value> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &vals)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "grad_check requires a scalar loss, got {}",
                tape.value(loss).shape_str()
            )));
        }
        Ok(tape.value(loss).scalar())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vals: Vec<Value> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vals)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check requires a scalar loss, got {}",
            tape.value(loss).shape_str()
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vals
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + epsilon;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - epsilon;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let g_n = (plus - minus) / (2.0 * epsilon);
            let g_a = analytic[pi][e];
            let rel = (g_a - g_n).abs() / f64::max(1e-8, g_a.abs() + g_n.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
