use std::sync::Arc;

use crate::error::{Error, Result};

use super::{mm_nn, mm_nt, mm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    /// Leaf or constant; no inputs.
    Source,
    Add(Var, Var),
    Mul(Var, Var),
    /// x[d,t] + broadcast of a column vector b[d,1] over every column.
    AddColBroadcast(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    SoftmaxCols(Var),
    Relu(Var),
    LayerNormCols {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
        rows: usize,
    },
    Sum(Var),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    /// Elementwise x * ln(max(x, floor)); the x*ln(x) -> 0 limit at 0.
    XLogX {
        x: Var,
        floor: f64,
    },
    /// Column j of the output is row tokens[j] of the table.
    Embed {
        table: Var,
        tokens: Vec<u32>,
    },
    /// Mean negative log-softmax of the target entry per column.
    CrossEntropyCols {
        logits: Var,
        targets: Vec<u32>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

const LN_EPS: f64 = 1e-5;

/// Records operations for one logical execution stream. Not shareable across
/// concurrent tasks; distinct tapes over shared read-only tensors are fine.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a differentiable leaf (copies the tensor).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Arc::new(t.clone()), Op::Source, true)
    }

    /// Registers a differentiable leaf sharing the tensor's storage.
    pub fn leaf_shared(&mut self, t: &Arc<Tensor>) -> Var {
        self.push(Arc::clone(t), Op::Source, true)
    }

    /// Registers a non-differentiable constant (copies the tensor).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Arc::new(t.clone()), Op::Source, false)
    }

    /// Registers a non-differentiable constant sharing the tensor's storage.
    pub fn constant_shared(&mut self, t: &Arc<Tensor>) -> Var {
        self.push(Arc::clone(t), Op::Source, false)
    }

    pub fn value(&self, v: Var) -> &Arc<Tensor> {
        &self.nodes[v.0].value
    }

    /// Current gradient buffer of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor; zeros when the node was never reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor {
                shape: node.value.shape().to_vec(),
                data: g.clone(),
            },
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    /// Clears every accumulated gradient. Callers own this decision; backward
    /// never resets.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---- recorded operations -------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Arc::new(out), Op::Add(a, b), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Arc::new(out), Op::Mul(a, b), req))
    }

    pub fn add_col_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if !tx.is_matrix() || tb.shape() != [tx.rows(), 1] {
            return Err(Error::ShapeMismatch {
                op: "add_col_broadcast",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (d, t) = (tx.rows(), tx.cols());
        let mut data = tx.data().to_vec();
        for r in 0..d {
            let b = tb.data()[r];
            for v in &mut data[r * t..(r + 1) * t] {
                *v += b;
            }
        }
        let out = Tensor {
            shape: vec![d, t],
            data,
        };
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(Arc::new(out), Op::AddColBroadcast(x, bias), req))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().map(|v| v * c).collect(),
        };
        let req = self.requires(x);
        self.push(Arc::new(out), Op::Scale(x, c), req)
    }

    /// Standard matrix product `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; m * n];
        mm_nn(ta.data(), m, k, tb.data(), n, &mut data);
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Arc::new(out), Op::Matmul(a, b), req))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let src = tx.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor {
            shape: vec![n, m],
            data,
        };
        let req = self.requires(x);
        Ok(self.push(Arc::new(out), Op::Transpose(x), req))
    }

    /// Softmax applied independently to each column, stabilized by
    /// per-column max subtraction.
    pub fn softmax_columns(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "softmax_columns",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (d, t) = (tx.rows(), tx.cols());
        let src = tx.data();
        let mut data = vec![0.0; d * t];
        for j in 0..t {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..d {
                mx = mx.max(src[i * t + j]);
            }
            let mut sum = 0.0;
            for i in 0..d {
                let e = (src[i * t + j] - mx).exp();
                data[i * t + j] = e;
                sum += e;
            }
            for i in 0..d {
                data[i * t + j] /= sum;
            }
        }
        let out = Tensor {
            shape: vec![d, t],
            data,
        };
        let req = self.requires(x);
        Ok(self.push(Arc::new(out), Op::SoftmaxCols(x), req))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().map(|v| v.max(0.0)).collect(),
        };
        let req = self.requires(x);
        self.push(Arc::new(out), Op::Relu(x), req)
    }

    /// Per-column layer normalization with affine scale/offset (`gamma`,
    /// `beta` are `[d,1]`).
    pub fn layer_norm_columns(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if !tx.is_matrix() || tg.shape() != [tx.rows(), 1] || tb.shape() != [tx.rows(), 1] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_columns",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let (d, t) = (tx.rows(), tx.cols());
        let src = tx.data();
        let mut data = vec![0.0; d * t];
        for j in 0..t {
            let mut mean = 0.0;
            for i in 0..d {
                mean += src[i * t + j];
            }
            mean /= d as f64;
            let mut var = 0.0;
            for i in 0..d {
                let c = src[i * t + j] - mean;
                var += c * c;
            }
            var /= d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..d {
                let xhat = (src[i * t + j] - mean) * inv;
                data[i * t + j] = tg.data()[i] * xhat + tb.data()[i];
            }
        }
        let out = Tensor {
            shape: vec![d, t],
            data,
        };
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(Arc::new(out), Op::LayerNormCols { x, gamma, beta }, req))
    }

    /// Column-wise concatenation `[d,ta] ++ [d,tb] -> [d,ta+tb]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.rows() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (d, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; d * (ca + cb)];
        for r in 0..d {
            data[r * (ca + cb)..r * (ca + cb) + ca]
                .copy_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            data[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                .copy_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        let out = Tensor {
            shape: vec![d, ca + cb],
            data,
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Arc::new(out), Op::ConcatCols(a, b), req))
    }

    /// Row-wise concatenation of matrices sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if !tp.is_matrix() || tp.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
            rows += tp.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor {
            shape: vec![rows, cols],
            data,
        };
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Arc::new(out), Op::ConcatRows(parts.to_vec()), req))
    }

    /// Contiguous row block `x[start..start+rows, :]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, rows: usize) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_matrix() || start + rows > tx.rows() || rows == 0 {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of bounds for {:?}",
                start + rows,
                tx.shape()
            )));
        }
        let cols = tx.cols();
        let data = tx.data()[start * cols..(start + rows) * cols].to_vec();
        let out = Tensor {
            shape: vec![rows, cols],
            data,
        };
        let req = self.requires(x);
        Ok(self.push(Arc::new(out), Op::SliceRows { x, start, rows }, req))
    }

    /// Sum of all entries, as a `[1,1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let req = self.requires(x);
        self.push(Arc::new(Tensor::scalar(total)), Op::Sum(x), req)
    }

    /// Gathers flat entries into a `[len,1]` column.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if indices.is_empty() || indices.iter().any(|&i| i >= tx.numel()) {
            return Err(Error::Contract(format!(
                "gather indices out of bounds for {} elements",
                tx.numel()
            )));
        }
        let data: Vec<f64> = indices.iter().map(|&i| tx.data()[i]).collect();
        let out = Tensor {
            shape: vec![indices.len(), 1],
            data,
        };
        let req = self.requires(x);
        Ok(self.push(
            Arc::new(out),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            req,
        ))
    }

    /// Elementwise `x * ln(max(x, floor))`, so that 0 * ln 0 contributes 0.
    pub fn xlogx(&mut self, x: Var, floor: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: tx.data().iter().map(|&v| v * v.max(floor).ln()).collect(),
        };
        let req = self.requires(x);
        self.push(Arc::new(out), Op::XLogX { x, floor }, req)
    }

    /// Embedding lookup: output column j is table row `tokens[j]`.
    pub fn embed(&mut self, table: Var, tokens: &[u32]) -> Result<Var> {
        let tt = self.value(table);
        if !tt.is_matrix() || tokens.is_empty() {
            return Err(Error::Contract("embed needs a matrix table and tokens".into()));
        }
        let (vocab, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Vocab(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let n = tokens.len();
        let mut data = vec![0.0; d * n];
        for (j, &tok) in tokens.iter().enumerate() {
            let row = &tt.data()[tok as usize * d..(tok as usize + 1) * d];
            for r in 0..d {
                data[r * n + j] = row[r];
            }
        }
        let out = Tensor {
            shape: vec![d, n],
            data,
        };
        let req = self.requires(table);
        Ok(self.push(
            Arc::new(out),
            Op::Embed {
                table,
                tokens: tokens.to_vec(),
            },
            req,
        ))
    }

    /// Mean cross-entropy over columns: `-(1/T) sum_t log softmax(logits[:,t])[y_t]`.
    pub fn cross_entropy_columns(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let tl = self.value(logits);
        if !tl.is_matrix() || tl.cols() != targets.len() || targets.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_columns",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (v, t) = (tl.rows(), tl.cols());
        if let Some(&bad) = targets.iter().find(|&&y| (y as usize) >= v) {
            return Err(Error::Vocab(format!(
                "target id {bad} out of range for {v} classes"
            )));
        }
        let src = tl.data();
        let mut total = 0.0;
        for (j, &y) in targets.iter().enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..v {
                mx = mx.max(src[i * t + j]);
            }
            let mut lse = 0.0;
            for i in 0..v {
                lse += (src[i * t + j] - mx).exp();
            }
            let lse = mx + lse.ln();
            total += lse - src[y as usize * t + j];
        }
        total /= t as f64;
        let req = self.requires(logits);
        Ok(self.push(
            Arc::new(Tensor::scalar(total)),
            Op::CrossEntropyCols {
                logits,
                targets: targets.to_vec(),
            },
            req,
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Propagates the chain rule from a scalar loss back to every node that
    /// requires gradients. Contributions add onto existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dout) = adj[i].take() else { continue };
            self.propagate(i, &dout, &mut adj);
            let node = &mut self.nodes[i];
            let grad = node
                .grad
                .get_or_insert_with(|| vec![0.0; node.value.numel()]);
            for (g, d) in grad.iter_mut().zip(&dout) {
                *g += d;
            }
        }
        Ok(())
    }

    fn accum(&self, adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires(v) {
            return;
        }
        let buf = adj[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
        f(buf);
    }

    fn propagate(&self, i: usize, dout: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Source => {}
            Op::Add(a, b) => {
                self.accum(adj, *a, |buf| {
                    for (g, d) in buf.iter_mut().zip(dout) {
                        *g += d;
                    }
                });
                self.accum(adj, *b, |buf| {
                    for (g, d) in buf.iter_mut().zip(dout) {
                        *g += d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                self.accum(adj, *a, |buf| {
                    for ((g, d), y) in buf.iter_mut().zip(dout).zip(tb.data()) {
                        *g += d * y;
                    }
                });
                self.accum(adj, *b, |buf| {
                    for ((g, d), x) in buf.iter_mut().zip(dout).zip(ta.data()) {
                        *g += d * x;
                    }
                });
            }
            Op::AddColBroadcast(x, bias) => {
                let t = self.value(*x).cols();
                let d = self.value(*x).rows();
                self.accum(adj, *x, |buf| {
                    for (g, dv) in buf.iter_mut().zip(dout) {
                        *g += dv;
                    }
                });
                self.accum(adj, *bias, |buf| {
                    for r in 0..d {
                        let mut acc = 0.0;
                        for j in 0..t {
                            acc += dout[r * t + j];
                        }
                        buf[r] += acc;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accum(adj, *x, |buf| {
                    for (g, d) in buf.iter_mut().zip(dout) {
                        *g += d * c;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA += dC * B^T ; dB += A^T * dC
                self.accum(adj, *a, |buf| mm_nt(dout, m, n, tb.data(), k, buf));
                self.accum(adj, *b, |buf| mm_tn(ta.data(), m, k, dout, n, buf));
            }
            Op::Transpose(x) => {
                let (m, n) = {
                    let tx = self.value(*x);
                    (tx.rows(), tx.cols())
                };
                // output is [n,m]; dX[i,j] += dOut[j,i]
                self.accum(adj, *x, |buf| {
                    for j in 0..n {
                        for ii in 0..m {
                            buf[ii * n + j] += dout[j * m + ii];
                        }
                    }
                });
            }
            Op::SoftmaxCols(x) => {
                let s = self.nodes[i].value.clone();
                let (d, t) = (s.rows(), s.cols());
                self.accum(adj, *x, |buf| {
                    for j in 0..t {
                        let mut dot = 0.0;
                        for r in 0..d {
                            dot += s.data()[r * t + j] * dout[r * t + j];
                        }
                        for r in 0..d {
                            let sv = s.data()[r * t + j];
                            buf[r * t + j] += sv * (dout[r * t + j] - dot);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let tx = self.value(*x).clone();
                self.accum(adj, *x, |buf| {
                    for ((g, d), v) in buf.iter_mut().zip(dout).zip(tx.data()) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::LayerNormCols { x, gamma, beta } => {
                let tx = self.value(*x).clone();
                let tg = self.value(*gamma).clone();
                let (d, t) = (tx.rows(), tx.cols());
                // Recompute per-column statistics.
                let mut xhat = vec![0.0; d * t];
                let mut inv_sigma = vec![0.0; t];
                for j in 0..t {
                    let mut mean = 0.0;
                    for r in 0..d {
                        mean += tx.data()[r * t + j];
                    }
                    mean /= d as f64;
                    let mut var = 0.0;
                    for r in 0..d {
                        let c = tx.data()[r * t + j] - mean;
                        var += c * c;
                    }
                    var /= d as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    inv_sigma[j] = inv;
                    for r in 0..d {
                        xhat[r * t + j] = (tx.data()[r * t + j] - mean) * inv;
                    }
                }
                self.accum(adj, *x, |buf| {
                    for j in 0..t {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for r in 0..d {
                            let g = tg.data()[r] * dout[r * t + j];
                            mean_g += g;
                            mean_gx += g * xhat[r * t + j];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        for r in 0..d {
                            let g = tg.data()[r] * dout[r * t + j];
                            buf[r * t + j] +=
                                inv_sigma[j] * (g - mean_g - xhat[r * t + j] * mean_gx);
                        }
                    }
                });
                self.accum(adj, *gamma, |buf| {
                    for r in 0..d {
                        let mut acc = 0.0;
                        for j in 0..t {
                            acc += dout[r * t + j] * xhat[r * t + j];
                        }
                        buf[r] += acc;
                    }
                });
                self.accum(adj, *beta, |buf| {
                    for r in 0..d {
                        let mut acc = 0.0;
                        for j in 0..t {
                            acc += dout[r * t + j];
                        }
                        buf[r] += acc;
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (d, ca) = {
                    let ta = self.value(*a);
                    (ta.rows(), ta.cols())
                };
                let cb = self.value(*b).cols();
                let tc = ca + cb;
                self.accum(adj, *a, |buf| {
                    for r in 0..d {
                        for j in 0..ca {
                            buf[r * ca + j] += dout[r * tc + j];
                        }
                    }
                });
                self.accum(adj, *b, |buf| {
                    for r in 0..d {
                        for j in 0..cb {
                            buf[r * cb + j] += dout[r * tc + ca + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accum(adj, p, |buf| {
                        for (g, d) in buf.iter_mut().zip(&dout[offset..offset + len]) {
                            *g += d;
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceRows { x, start, rows } => {
                let cols = self.value(*x).cols();
                let (start, rows) = (*start, *rows);
                self.accum(adj, *x, |buf| {
                    for (g, d) in buf[start * cols..(start + rows) * cols]
                        .iter_mut()
                        .zip(dout)
                    {
                        *g += d;
                    }
                });
            }
            Op::Sum(x) => {
                let d = dout[0];
                self.accum(adj, *x, |buf| {
                    for g in buf.iter_mut() {
                        *g += d;
                    }
                });
            }
            Op::Gather { x, indices } => {
                self.accum(adj, *x, |buf| {
                    for (pos, &idx) in indices.iter().enumerate() {
                        buf[idx] += dout[pos];
                    }
                });
            }
            Op::XLogX { x, floor } => {
                let tx = self.value(*x).clone();
                let floor = *floor;
                self.accum(adj, *x, |buf| {
                    for ((g, d), &v) in buf.iter_mut().zip(dout).zip(tx.data()) {
                        let deriv = if v >= floor {
                            v.ln() + 1.0
                        } else {
                            floor.ln()
                        };
                        *g += d * deriv;
                    }
                });
            }
            Op::Embed { table, tokens } => {
                let d = self.value(*table).cols();
                let n = tokens.len();
                self.accum(adj, *table, |buf| {
                    for (j, &tok) in tokens.iter().enumerate() {
                        for r in 0..d {
                            buf[tok as usize * d + r] += dout[r * n + j];
                        }
                    }
                });
            }
            Op::CrossEntropyCols { logits, targets } => {
                let tl = self.value(*logits).clone();
                let (v, t) = (tl.rows(), tl.cols());
                let scale = dout[0] / t as f64;
                self.accum(adj, *logits, |buf| {
                    let src = tl.data();
                    for (j, &y) in targets.iter().enumerate() {
                        let mut mx = f64::NEG_INFINITY;
                        for r in 0..v {
                            mx = mx.max(src[r * t + j]);
                        }
                        let mut sum = 0.0;
                        for r in 0..v {
                            sum += (src[r * t + j] - mx).exp();
                        }
                        for r in 0..v {
                            let p = (src[r * t + j] - mx).exp() / sum;
                            let onehot = if r == y as usize { 1.0 } else { 0.0 };
                            buf[r * t + j] += scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}
