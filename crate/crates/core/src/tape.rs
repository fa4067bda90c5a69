//! Reverse-mode differentiation over a recorded operation list.
//!
//! The tape owns every intermediate buffer; ops execute eagerly and are
//! replayed in reverse for the backward pass. All tape values are 2-D
//! (rows x cols); scalars are 1x1. Leaves carry a trainable flag — backward
//! never allocates a gradient buffer for a frozen leaf.

use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    Matmul { a: Var, b: Var },
    MatmulTB { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddRow { x: Var, row: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gelu { x: Var },
    SumAll { x: Var },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize, end: usize },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize, end: usize },
    ScatterAddRows { base: Var, add: Var, rows: Vec<usize> },
    CrossEntropyMean { logits: Var, labels: Vec<usize> },
}

#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    shapes: Vec<(usize, usize)>,
    vals: Vec<Vec<f64>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.shapes[v.0]
    }

    /// Gradient of the last `backward` call, if any flowed to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        Tensor::new(vec![r, c], self.vals[v.0].clone()).expect("tape shape consistent")
    }

    fn push(&mut self, op: Op, shape: (usize, usize), vals: Vec<f64>, name: &'static str) -> Result<Var> {
        debug_assert_eq!(shape.0 * shape.1, vals.len());
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.ops.push(op);
        self.shapes.push(shape);
        self.vals.push(vals);
        self.grads.push(None);
        Ok(Var(self.ops.len() - 1))
    }

    /// Registers a tensor as a leaf; `requires_grad` controls whether backward
    /// will accumulate a gradient for it.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf_raw(t.rows(), t.cols(), t.values().to_vec(), t.requires_grad())
    }

    pub fn leaf_raw(&mut self, rows: usize, cols: usize, vals: Vec<f64>, trainable: bool) -> Result<Var> {
        if rows * cols != vals.len() {
            return Err(Error::contract(format!(
                "leaf shape {rows}x{cols} does not hold {} values",
                vals.len()
            )));
        }
        self.push(Op::Leaf { trainable }, (rows, cols), vals, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shapes[a.0];
        let (k2, n) = self.shapes[b.0];
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_into(&self.vals[a.0], &self.vals[b.0], &mut out, m, k, n);
        self.push(Op::Matmul { a, b }, (m, n), out, "matmul")
    }

    /// a · bᵀ, with `b` stored row-major as [n x k].
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shapes[a.0];
        let (n, k2) = self.shapes[b.0];
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tb",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_tb_into(&self.vals[a.0], &self.vals[b.0], &mut out, m, k, n);
        self.push(Op::MatmulTB { a, b }, (m, n), out, "matmul_tb")
    }

    fn zip_elementwise(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        let sa = self.shapes[a.0];
        let sb = self.shapes[b.0];
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: vec![sa.0, sa.1],
                rhs: vec![sb.0, sb.1],
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.zip_elementwise(a, b, "add")?;
        let out: Vec<f64> = self.vals[a.0]
            .iter()
            .zip(self.vals[b.0].iter())
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add { a, b }, shape, out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.zip_elementwise(a, b, "sub")?;
        let out: Vec<f64> = self.vals[a.0]
            .iter()
            .zip(self.vals[b.0].iter())
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub { a, b }, shape, out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.zip_elementwise(a, b, "mul")?;
        let out: Vec<f64> = self.vals[a.0]
            .iter()
            .zip(self.vals[b.0].iter())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul { a, b }, shape, out, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shapes[x.0];
        let out: Vec<f64> = self.vals[x.0].iter().map(|v| c * v).collect();
        self.push(Op::Scale { x, c }, shape, out, "scale")
    }

    /// Broadcast-adds a 1 x C row vector to every row of x.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, c) = self.shapes[x.0];
        let (rr, rc) = self.shapes[row.0];
        if rr != 1 || rc != c {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, c],
                rhs: vec![rr, rc],
            });
        }
        let mut out = self.vals[x.0].clone();
        for r in 0..m {
            for (o, &b) in out[r * c..(r + 1) * c].iter_mut().zip(self.vals[row.0].iter()) {
                *o += b;
            }
        }
        self.push(Op::AddRow { x, row }, (m, c), out, "add_row")
    }

    /// Softmax along the last axis (per row), max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, c) = self.shapes[x.0];
        let mut out = vec![0.0; m * c];
        tensor::softmax_rows_into(&self.vals[x.0], &mut out, m, c);
        self.push(Op::SoftmaxRows { x }, (m, c), out, "softmax")
    }

    /// Per-row zero-mean unit-variance normalisation followed by an affine
    /// (gain, bias both 1 x C). `eps` is added inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, c) = self.shapes[x.0];
        for (v, name) in [(gain, "layer_norm gain"), (bias, "layer_norm bias")] {
            let s = self.shapes[v.0];
            if s != (1, c) {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![m, c],
                    rhs: vec![s.0, s.1],
                });
            }
            let _ = name;
        }
        let g = &self.vals[gain.0];
        let b = &self.vals[bias.0];
        let xv = &self.vals[x.0];
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..c {
                out[r * c + i] = (row[i] - mean) * inv * g[i] + b[i];
            }
        }
        self.push(Op::LayerNorm { x, gain, bias, eps }, (m, c), out, "layer_norm")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shapes[x.0];
        let out: Vec<f64> = self.vals[x.0].iter().map(|&v| tensor::gelu(v)).collect();
        self.push(Op::Gelu { x }, shape, out, "gelu")
    }

    /// Left-to-right sum of all elements; returns a 1x1 scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = 0.0;
        for &v in &self.vals[x.0] {
            acc += v;
        }
        self.push(Op::SumAll { x }, (1, 1), vec![acc], "sum_all")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows needs at least one part"));
        }
        let c = self.shapes[parts[0].0].1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shapes[p.0];
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![pr, pc],
                });
            }
            rows += pr;
            out.extend_from_slice(&self.vals[p.0]);
        }
        self.push(Op::ConcatRows { parts: parts.to_vec() }, (rows, c), out, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, c) = self.shapes[x.0];
        if start > end || end > m {
            return Err(Error::contract(format!(
                "slice_rows {start}..{end} out of range for {m} rows"
            )));
        }
        let out = self.vals[x.0][start * c..end * c].to_vec();
        self.push(Op::SliceRows { x, start, end }, (end - start, c), out, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols needs at least one part"));
        }
        let m = self.shapes[parts[0].0].0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shapes[p.0];
            if pr != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m, cols],
                    rhs: vec![pr, pc],
                });
            }
            cols += pc;
        }
        let mut out = vec![0.0; m * cols];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.shapes[p.0];
            for r in 0..m {
                out[r * cols + off..r * cols + off + pc]
                    .copy_from_slice(&self.vals[p.0][r * pc..(r + 1) * pc]);
            }
            off += pc;
        }
        self.push(Op::ConcatCols { parts: parts.to_vec() }, (m, cols), out, "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, c) = self.shapes[x.0];
        if start > end || end > c {
            return Err(Error::contract(format!(
                "slice_cols {start}..{end} out of range for {c} cols"
            )));
        }
        let w = end - start;
        let mut out = vec![0.0; m * w];
        for r in 0..m {
            out[r * w..(r + 1) * w].copy_from_slice(&self.vals[x.0][r * c + start..r * c + end]);
        }
        self.push(Op::SliceCols { x, start, end }, (m, w), out, "slice_cols")
    }

    /// out = base; out[rows[j], :] += add[j, :]. Row indices must be unique
    /// and in range; the index list itself is a constant (no gradient flows
    /// through the selection).
    pub fn scatter_add_rows(&mut self, base: Var, add: Var, rows: &[usize]) -> Result<Var> {
        let (m, c) = self.shapes[base.0];
        let (ar, ac) = self.shapes[add.0];
        if ar != rows.len() || ac != c {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: vec![m, c],
                rhs: vec![ar, ac],
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::contract(format!(
                "scatter_add_rows index {bad} out of range for {m} rows"
            )));
        }
        let mut out = self.vals[base.0].clone();
        for (j, &r) in rows.iter().enumerate() {
            for (o, &a) in out[r * c..(r + 1) * c]
                .iter_mut()
                .zip(self.vals[add.0][j * c..(j + 1) * c].iter())
            {
                *o += a;
            }
        }
        self.push(
            Op::ScatterAddRows { base, add, rows: rows.to_vec() },
            (m, c),
            out,
            "scatter_add_rows",
        )
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.shapes[logits.0];
        if labels.len() != m {
            return Err(Error::contract(format!(
                "{} labels for {m} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let xv = &self.vals[logits.0];
        let mut acc = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &xv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            acc += lse - row[y];
        }
        let loss = acc / m as f64;
        self.push(
            Op::CrossEntropyMean { logits, labels: labels.to_vec() },
            (1, 1),
            vec![loss],
            "cross_entropy_mean",
        )
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        if let Op::Leaf { trainable: false } = self.ops[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contribution.iter()) {
                    *gi += ci;
                }
            }
            None => self.grads[v.0] = Some(contribution.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients land in the tape and can be
    /// read per-var with [`Tape::grad`]; trainable leaves with no path to the
    /// loss simply keep `None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shapes[loss.0] != (1, 1) {
            let (r, c) = self.shapes[loss.0];
            return Err(Error::contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            let Some(g_out) = self.grads[idx].clone() else { continue };
            let op = self.ops[idx].clone();
            match op {
                Op::Leaf { .. } => {}
                Op::Matmul { a, b } => {
                    let (m, k) = self.shapes[a.0];
                    let n = self.shapes[b.0].1;
                    // d a = g · bᵀ
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_tb_into(&g_out, &self.vals[b.0], &mut da, m, n, k);
                    self.accumulate(a, &da);
                    // d b = aᵀ · g
                    let mut db = vec![0.0; k * n];
                    tensor::matmul_ta_into(&self.vals[a.0], &g_out, &mut db, m, k, n);
                    self.accumulate(b, &db);
                }
                Op::MatmulTB { a, b } => {
                    let (m, k) = self.shapes[a.0];
                    let n = self.shapes[b.0].0;
                    // d a = g · b
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_into(&g_out, &self.vals[b.0], &mut da, m, n, k);
                    self.accumulate(a, &da);
                    // d b = gᵀ · a
                    let mut db = vec![0.0; n * k];
                    tensor::matmul_ta_into(&g_out, &self.vals[a.0], &mut db, m, n, k);
                    self.accumulate(b, &db);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &g_out);
                    self.accumulate(b, &g_out);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &g_out);
                    let neg: Vec<f64> = g_out.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = g_out
                        .iter()
                        .zip(self.vals[b.0].iter())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(a, &da);
                    let db: Vec<f64> = g_out
                        .iter()
                        .zip(self.vals[a.0].iter())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(b, &db);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g_out.iter().map(|g| c * g).collect();
                    self.accumulate(x, &dx);
                }
                Op::AddRow { x, row } => {
                    self.accumulate(x, &g_out);
                    let (m, c) = self.shapes[x.0];
                    let mut drow = vec![0.0; c];
                    for r in 0..m {
                        for (d, &g) in drow.iter_mut().zip(g_out[r * c..(r + 1) * c].iter()) {
                            *d += g;
                        }
                    }
                    self.accumulate(row, &drow);
                }
                Op::SoftmaxRows { x } => {
                    let (m, c) = self.shapes[x.0];
                    let y = &self.vals[idx];
                    let mut dx = vec![0.0; m * c];
                    for r in 0..m {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g_out[r * c..(r + 1) * c];
                        let dot: f64 = gr.iter().zip(yr.iter()).map(|(g, y)| g * y).sum();
                        for i in 0..c {
                            dx[r * c + i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (m, c) = self.shapes[x.0];
                    let xv = &self.vals[x.0];
                    let g = &self.vals[gain.0];
                    let mut dx = vec![0.0; m * c];
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    for r in 0..m {
                        let row = &xv[r * c..(r + 1) * c];
                        let gr = &g_out[r * c..(r + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        // d xhat_i = g_i * gain_i
                        let dxhat: Vec<f64> = gr.iter().zip(g.iter()).map(|(g, w)| g * w).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(xhat.iter()).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                        for i in 0..c {
                            dx[r * c + i] = inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                            dgain[i] += gr[i] * xhat[i];
                            dbias[i] += gr[i];
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gain, &dgain);
                    self.accumulate(bias, &dbias);
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = g_out
                        .iter()
                        .zip(self.vals[x.0].iter())
                        .map(|(g, &v)| g * tensor::gelu_deriv(v))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::SumAll { x } => {
                    let dx = vec![g_out[0]; self.vals[x.0].len()];
                    self.accumulate(x, &dx);
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let (pr, pc) = self.shapes[p.0];
                        let n = pr * pc;
                        self.accumulate(p, &g_out[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::SliceRows { x, start, end } => {
                    let (m, c) = self.shapes[x.0];
                    let mut dx = vec![0.0; m * c];
                    dx[start * c..end * c].copy_from_slice(&g_out);
                    self.accumulate(x, &dx);
                }
                Op::ConcatCols { parts } => {
                    let (m, cols) = self.shapes[idx];
                    let mut off = 0;
                    for p in parts {
                        let (_, pc) = self.shapes[p.0];
                        let mut dp = vec![0.0; m * pc];
                        for r in 0..m {
                            dp[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g_out[r * cols + off..r * cols + off + pc]);
                        }
                        self.accumulate(p, &dp);
                        off += pc;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let (m, c) = self.shapes[x.0];
                    let w = end - start;
                    let mut dx = vec![0.0; m * c];
                    for r in 0..m {
                        dx[r * c + start..r * c + end].copy_from_slice(&g_out[r * w..(r + 1) * w]);
                    }
                    self.accumulate(x, &dx);
                }
                Op::ScatterAddRows { base, add, rows } => {
                    self.accumulate(base, &g_out);
                    let c = self.shapes[base.0].1;
                    let mut dadd = vec![0.0; rows.len() * c];
                    for (j, &r) in rows.iter().enumerate() {
                        dadd[j * c..(j + 1) * c].copy_from_slice(&g_out[r * c..(r + 1) * c]);
                    }
                    self.accumulate(add, &dadd);
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let (m, c) = self.shapes[logits.0];
                    let xv = &self.vals[logits.0];
                    let scale = g_out[0] / m as f64;
                    let mut dx = vec![0.0; m * c];
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &xv[r * c..(r + 1) * c];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for i in 0..c {
                            let e = (row[i] - max).exp();
                            dx[r * c + i] = e;
                            sum += e;
                        }
                        for i in 0..c {
                            dx[r * c + i] = dx[r * c + i] / sum * scale;
                        }
                        dx[r * c + y] -= scale;
                    }
                    self.accumulate(logits, &dx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_from(tape: &mut Tape, rows: usize, cols: usize, vals: &[f64]) -> Var {
        tape.leaf_raw(rows, cols, vals.to_vec(), true).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = leaf_from(&mut tape, 1, 3, &[4.0, -1.0, 2.5]);
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_sum_of_squares_is_p() {
        let mut tape = Tape::new();
        let p = leaf_from(&mut tape, 1, 2, &[1.0, 2.0]);
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let p = leaf_from(&mut tape, 1, 2, &[1.0, 2.0]);
        assert!(matches!(tape.backward(p), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn frozen_leaf_accumulates_no_gradient() {
        let mut tape = Tape::new();
        let frozen = tape.leaf_raw(1, 2, vec![3.0, 4.0], false).unwrap();
        let p = leaf_from(&mut tape, 1, 2, &[1.0, 2.0]);
        let prod = tape.mul(frozen, p).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert_eq!(tape.grad(p).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, 2, 3, &[0.0; 6]);
        let b = leaf_from(&mut tape, 2, 2, &[0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_of_equal_pair_is_half_half() {
        for c in [-7.0, 0.0, 13.5] {
            let mut tape = Tape::new();
            let x = leaf_from(&mut tape, 1, 2, &[c, c]);
            let y = tape.softmax_rows(x).unwrap();
            assert_eq!(tape.value(y), &[0.5, 0.5]);
        }
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, 1, 1, &[2.7]);
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y), &[1.0]);
    }

    #[test]
    fn layer_norm_hand_cases() {
        // constant token has zero variance; output collapses to bias
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, 1, 4, &[3.0; 4]);
        let gain = tape.leaf_raw(1, 4, vec![1.0; 4], false).unwrap();
        let bias = tape.leaf_raw(1, 4, vec![0.0; 4], false).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-6).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        // x=[1,3]: mean 2, population std 1
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, 1, 2, &[1.0, 3.0]);
        let gain = tape.leaf_raw(1, 2, vec![1.0; 2], false).unwrap();
        let bias = tape.leaf_raw(1, 2, vec![0.0; 2], false).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-6);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-6);

        // zero gain: output equals bias broadcast
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, 2, 2, &[0.3, -2.0, 5.0, 1.0]);
        let gain = tape.leaf_raw(1, 2, vec![0.0; 2], false).unwrap();
        let bias = tape.leaf_raw(1, 2, vec![0.7, -0.2], false).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-6).unwrap();
        assert_eq!(tape.value(y), &[0.7, -0.2, 0.7, -0.2]);
    }

    #[test]
    fn overflow_is_an_error_not_a_silent_state() {
        let mut tape = Tape::new();
        let x = leaf_from(&mut tape, 1, 1, &[700.0]);
        // repeated squaring: 700^(2^7) overflows f64, and the op must say so
        let mut cur = tape.mul(x, x).unwrap();
        let mut overflowed = false;
        for _ in 0..6 {
            match tape.mul(cur, cur) {
                Ok(v) => cur = v,
                Err(crate::Error::NonFinite { .. }) => {
                    overflowed = true;
                    break;
                }
                Err(other) => panic!("unexpected error {other}"),
            }
        }
        assert!(overflowed);
    }

    #[test]
    fn scatter_add_rows_forward_and_grad() {
        let mut tape = Tape::new();
        let base = leaf_from(&mut tape, 3, 2, &[0.0, 0.0, 5.0, 5.0, 9.0, 9.0]);
        let add = leaf_from(&mut tape, 2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let out = tape.scatter_add_rows(base, add, &[2, 0]).unwrap();
        assert_eq!(tape.value(out), &[2.0, 2.0, 5.0, 5.0, 10.0, 10.0]);

        // weight rows to give distinct upstream gradients
        let w = tape
            .leaf_raw(3, 2, vec![1.0, 1.0, 10.0, 10.0, 100.0, 100.0], false)
            .unwrap();
        let weighted = tape.mul(out, w).unwrap();
        let loss = tape.sum_all(weighted).unwrap();
        tape.backward(loss).unwrap();
        // d add[j] = upstream gradient at row omega[j]
        assert_eq!(tape.grad(add).unwrap(), &[100.0, 100.0, 1.0, 1.0]);
    }

    #[test]
    fn determinism_same_ops_same_bits() {
        let run = || {
            let mut rng = crate::rng::Rng::seeded(5);
            let mut tape = Tape::new();
            let a_vals: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b_vals: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let a = tape.leaf_raw(3, 4, a_vals, true).unwrap();
            let b = tape.leaf_raw(4, 3, b_vals, true).unwrap();
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax_rows(c).unwrap();
            let loss = tape.sum_all(s).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(s).to_vec(),
                tape.grad(a).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1.iter().zip(&v2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
