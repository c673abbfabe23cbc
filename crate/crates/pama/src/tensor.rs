//! Dense row-major matrices and tape-based reverse-mode differentiation.
//!
//! The op set is exactly what the model needs — matrix products, row softmax,
//! layer norm, bias-table lookups, GELU, concatenation, row gathers and the
//! two losses — nothing more. All values are `f64`; every training step
//! rebuilds its graph on a fresh [`Tape`], so node ids ([`Var`]) are only
//! meaningful relative to the tape that issued them.
//!
//! The tape also counts multiply-accumulate operations (matrix products plus
//! elementwise multiplies) so attention variants can be compared by counted
//! cost rather than wall clock; see [`crate::bench`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: index {index} out of range ({len} valid)")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward needs a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input list")]
    EmptyConcat { op: &'static str },
}

// ── values ──────────────────────────────────────────────────────────────

/// Row-major `rows x cols` matrix of `f64`. Scalars are `1x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Leaves with this flag set receive gradients in [`Tape::backward`].
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                expected: format!("{} values for {rows}x{cols}", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            requires_grad: false,
        })
    }

    /// Constructor for trainable parameters (`requires_grad = true`).
    pub fn param(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Ok(Tensor::new(rows, cols, data)?.with_grad())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            requires_grad: false,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Integer matrix used for distance buckets, polar bins and table lookups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u32>,
}

impl IndexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "IndexMatrix::new",
                expected: format!("{} values for {rows}x{cols}", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        Ok(IndexMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        IndexMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> u32 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of the given column range (used to slice position matrices down
    /// to the visible patches during masked pre-training).
    pub fn select_cols(&self, keep: &[usize]) -> Result<IndexMatrix, TensorError> {
        let mut data = Vec::with_capacity(self.rows * keep.len());
        for i in 0..self.rows {
            let row = self.row(i);
            for &j in keep {
                if j >= self.cols {
                    return Err(TensorError::IndexOutOfRange {
                        op: "IndexMatrix::select_cols",
                        index: j,
                        len: self.cols,
                    });
                }
                data.push(row[j]);
            }
        }
        IndexMatrix::new(self.rows, keep.len(), data)
    }

    /// Copy of the given row range (used to drop anchor rows).
    pub fn select_rows(&self, keep: &[usize]) -> Result<IndexMatrix, TensorError> {
        let mut data = Vec::with_capacity(keep.len() * self.cols);
        for &i in keep {
            if i >= self.rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "IndexMatrix::select_rows",
                    index: i,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        IndexMatrix::new(keep.len(), self.cols, data)
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────
// The three matmul orientations below carry essentially all of the compute;
// inner loops run over contiguous rows so they autovectorize.

/// `dst = a (m x k) · b (k x n)`, dst zeroed by caller.
fn matmul_acc(dst: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &mut dst[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (d, &bv) in drow.iter_mut().zip(brow) {
                *d += aip * bv;
            }
        }
    }
}

/// `dst (m x k) += x (m x n) · y (k x n)ᵀ` — rows of both operands are dotted.
fn matmul_abt_acc(dst: &mut [f64], x: &[f64], y: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let xrow = &x[i * n..(i + 1) * n];
        let drow = &mut dst[i * k..(i + 1) * k];
        for p in 0..k {
            let yrow = &y[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (xv, yv) in xrow.iter().zip(yrow) {
                acc += xv * yv;
            }
            drow[p] += acc;
        }
    }
}

/// `dst (k x n) += a (m x k)ᵀ · g (m x n)`.
fn matmul_atb_acc(dst: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let drow = &mut dst[p * n..(p + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += aip * gv;
            }
        }
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

// ── tape ────────────────────────────────────────────────────────────────

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Lookup { table: Var, idx: IndexMatrix },
    Gelu { a: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    GatherRows { a: Var, idx: Vec<usize> },
    SumAll { a: Var },
    MeanAll { a: Var },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation record. Build the forward pass through the `Op`
/// methods, then call [`Tape::backward`] once on a scalar loss.
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), macs: 0 }
    }

    /// Multiply-accumulate count so far: `m·k·n` per matrix product plus one
    /// per elementwise multiply. Cheap bookkeeping ops are not counted.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Convenience for reading a `1x1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs = value.requires_grad;
        self.push(Op::Leaf, value, needs)
    }

    /// Leaf that never receives a gradient (inputs, position tables, targets).
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.requires_grad = false;
        self.push(Op::Leaf, value, false)
    }

    // ── ops ─────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.cols != bv.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: format!("inner dims equal, lhs {}x{}", av.rows, av.cols),
                got: format!("rhs {}x{}", bv.rows, bv.cols),
            });
        }
        let (m, k, n) = (av.rows, av.cols, bv.cols);
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, &av.data, &bv.data, m, k, n);
        self.macs += (m * k * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, Tensor::new(m, n, out)?, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let (m, n) = (av.rows, av.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose { a }, Tensor::new(n, m, out)?, needs))
    }

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(usize, usize), TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rows != bv.rows || av.cols != bv.cols {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: format!("{}x{}", av.rows, av.cols),
                got: format!("{}x{}", bv.rows, bv.cols),
            });
        }
        Ok((av.rows, av.cols))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.binary_same_shape("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, Tensor::new(m, n, out)?, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.binary_same_shape("mul", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        self.macs += (m * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(m, n, out)?, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let (m, n) = (av.rows, av.cols);
        let out: Vec<f64> = av.data.iter().map(|x| x * factor).collect();
        self.macs += (m * n) as u64;
        let needs = self.needs(a);
        Ok(self.push(Op::Scale { a, factor }, Tensor::new(m, n, out)?, needs))
    }

    /// `x (n x d) + bias (1 x d)` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if bv.rows != 1 || bv.cols != xv.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                expected: format!("1x{}", xv.cols),
                got: format!("{}x{}", bv.rows, bv.cols),
            });
        }
        let (m, n) = (xv.rows, xv.cols);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(xv.data[i * n + j] + bv.data[j]);
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBias { x, bias }, Tensor::new(m, n, out)?, needs))
    }

    /// Row-wise softmax with max-shift for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let (m, n) = (av.rows, av.cols);
        if n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_rows",
                expected: "at least one column".into(),
                got: "0 columns".into(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av.data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        ensure_finite("softmax_rows", &out)?;
        let needs = self.needs(a);
        Ok(self.push(Op::SoftmaxRows { a }, Tensor::new(m, n, out)?, needs))
    }

    /// Per-row layer norm with affine output: `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let (m, n) = (xv.rows, xv.cols);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let t = &self.nodes[v.0].value;
            if t.rows != 1 || t.cols != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    expected: format!("{name} 1x{n}"),
                    got: format!("{}x{}", t.rows, t.cols),
                });
            }
        }
        let gv = &self.nodes[gamma.0].value.data;
        let bv = &self.nodes[beta.0].value.data;
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut rstds = vec![0.0; m];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = gv[j] * ((row[j] - mean) * rstd) + bv[j];
            }
        }
        ensure_finite("layer_norm", &out)?;
        self.macs += 2 * (m * n) as u64;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds },
            Tensor::new(m, n, out)?,
            needs,
        ))
    }

    /// `out[i][j] = table[0][idx[i][j]]` — turns an integer position matrix
    /// into a learnable bias matrix.
    pub fn lookup(&mut self, table: Var, idx: &IndexMatrix) -> Result<Var, TensorError> {
        let tv = &self.nodes[table.0].value;
        if tv.rows != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "lookup",
                expected: "table with one row".into(),
                got: format!("{}x{}", tv.rows, tv.cols),
            });
        }
        let len = tv.cols;
        let mut out = Vec::with_capacity(idx.data.len());
        for &k in &idx.data {
            let k = k as usize;
            if k >= len {
                return Err(TensorError::IndexOutOfRange { op: "lookup", index: k, len });
            }
            out.push(tv.data[k]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::Lookup { table, idx: idx.clone() },
            Tensor::new(idx.rows, idx.cols, out)?,
            needs,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let (m, n) = (av.rows, av.cols);
        let out: Vec<f64> = av.data.iter().map(|&x| gelu_scalar(x)).collect();
        self.macs += (m * n) as u64;
        let needs = self.needs(a);
        Ok(self.push(Op::Gelu { a }, Tensor::new(m, n, out)?, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyConcat { op: "concat_rows" });
        }
        let cols = self.nodes[parts[0].0].value.cols;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.cols != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    expected: format!("{cols} columns"),
                    got: format!("{}x{}", pv.rows, pv.cols),
                });
            }
            rows += pv.rows;
            out.extend_from_slice(&pv.data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatRows { parts: parts.to_vec() },
            Tensor::new(rows, cols, out)?,
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyConcat { op: "concat_cols" });
        }
        let rows = self.nodes[parts[0].0].value.rows;
        let mut cols = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.rows != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    expected: format!("{rows} rows"),
                    got: format!("{}x{}", pv.rows, pv.cols),
                });
            }
            cols += pv.cols;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let pv = &self.nodes[p.0].value;
                out.extend_from_slice(pv.row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols { parts: parts.to_vec() },
            Tensor::new(rows, cols, out)?,
            needs,
        ))
    }

    /// `out[i] = a[idx[i]]`; rows may repeat. The backward pass scatter-adds,
    /// so a row gathered twice accumulates both gradients.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let n = av.cols;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= av.rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: av.rows,
                });
            }
            out.extend_from_slice(av.row(i));
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::GatherRows { a, idx: idx.to_vec() },
            Tensor::new(idx.len(), n, out)?,
            needs,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        ensure_finite("sum_all", &[s])?;
        let needs = self.needs(a);
        Ok(self.push(Op::SumAll { a }, Tensor::scalar(s), needs))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        if av.numel() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_all",
                expected: "non-empty tensor".into(),
                got: "0 elements".into(),
            });
        }
        let s: f64 = av.data.iter().sum::<f64>() / av.numel() as f64;
        ensure_finite("mean_all", &[s])?;
        let needs = self.needs(a);
        Ok(self.push(Op::MeanAll { a }, Tensor::scalar(s), needs))
    }

    /// Softmax cross-entropy of a single `1 x C` logit row against a class id.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let lv = &self.nodes[logits.0].value;
        if lv.rows != 1 || lv.cols == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                expected: "1xC logits".into(),
                got: format!("{}x{}", lv.rows, lv.cols),
            });
        }
        if target >= lv.cols {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                len: lv.cols,
            });
        }
        let mx = lv.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.data.iter().map(|&v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let loss = sum.ln() - (lv.data[target] - mx);
        ensure_finite("cross_entropy", &[loss])?;
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, target, probs },
            Tensor::scalar(loss),
            needs,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns one gradient buffer per
    /// node that participated; read leaf gradients out of [`Gradients`].
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss { rows: lv.rows, cols: lv.cols });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_abt_acc(ga, g, &bv.data, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_atb_acc(gb, &av.data, g, m, k, n);
                }
            }
            Op::Transpose { a } => {
                let out = &node.value; // n x m
                if let Some(ga) = self.acc(grads, *a) {
                    let (n, m) = (out.rows, out.cols);
                    for j in 0..n {
                        for i in 0..m {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        for (d, s) in gv.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    let n = gb.len();
                    for (i, s) in g.iter().enumerate() {
                        gb[i % n] += s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, s), o) in ga.iter_mut().zip(g).zip(&bv.data) {
                        *d += s * o;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, s), o) in gb.iter_mut().zip(g).zip(&av.data) {
                        *d += s * o;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s * factor;
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                let s = &node.value;
                let (m, n) = (s.rows, s.cols);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        let srow = s.row(i);
                        let grow = &g[i * n..(i + 1) * n];
                        let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                        let garow = &mut ga[i * n..(i + 1) * n];
                        for j in 0..n {
                            garow[j] += srow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value.data;
                let (m, n) = (xv.rows, xv.cols);
                if let Some(gb) = self.acc(grads, *beta) {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            let xhat = (xv.data[i * n + j] - mean[i]) * rstd[i];
                            gg[j] += g[i * n + j] * xhat;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        let xrow = &xv.data[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean[i]) * rstd[i];
                            let gh = grow[j] * gv[j];
                            m1 += gh;
                            m2 += gh * xhat;
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        let gxrow = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            let xhat = (xrow[j] - mean[i]) * rstd[i];
                            let gh = grow[j] * gv[j];
                            gxrow[j] += rstd[i] * (gh - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Lookup { table, idx } => {
                if let Some(gt) = self.acc(grads, *table) {
                    for (&k, s) in idx.data.iter().zip(g) {
                        gt[k as usize] += s;
                    }
                }
            }
            Op::Gelu { a } => {
                let av = &self.nodes[a.0].value;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, s), &x) in ga.iter_mut().zip(g).zip(&av.data) {
                        *d += s * gelu_deriv(x);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p.0].value;
                    let len = pv.numel();
                    if let Some(gp) = self.acc(grads, p) {
                        for (d, s) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *d += s;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.value.rows;
                let total = node.value.cols;
                let mut col0 = 0;
                for &p in parts {
                    let pv = &self.nodes[p.0].value;
                    let pc = pv.cols;
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..rows {
                            let src = &g[i * total + col0..i * total + col0 + pc];
                            let dst = &mut gp[i * pc..(i + 1) * pc];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    col0 += pc;
                }
            }
            Op::GatherRows { a, idx } => {
                let n = node.value.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &src_row) in idx.iter().enumerate() {
                        let grow = &g[i * n..(i + 1) * n];
                        let dst = &mut ga[src_row * n..(src_row + 1) * n];
                        for (d, s) in dst.iter_mut().zip(grow) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll { a } => {
                let numel = self.nodes[a.0].value.numel() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / numel;
                    for d in ga.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    for (j, (d, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let y = if j == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (p - y);
                    }
                }
            }
        }
    }
}

/// Two-layer MLP: `x·w1 + b1 → GELU → ·w2 + b2`. The block MLPs in the
/// encoder/decoder are exactly this shape.
pub fn mlp_forward(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var, TensorError> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.gelu(h)?;
    let out = tape.matmul(h, w2)?;
    tape.add_bias(out, b2)
}

/// Gradient buffers from one [`Tape::backward`] sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
