//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every operation appends a node to the [`Tape`]; node ids are handed out
//! in creation order, so the tape is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. A tape lives for one
//! training step: build the graph, call `backward`, read the gradients of
//! the parameter leaves, then drop or [`Tape::reset`] it.

use super::AutogradError;

type Result<T> = std::result::Result<T, AutogradError>;

/// Dense row-major array, optionally carrying its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutogradError::BadData {
                shape,
                len: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// (rows, cols) view used by the row-wise ops; the last axis is the row.
    fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        match self.values.len().checked_div(cols) {
            Some(rows) => (rows, cols),
            None => (0, 0),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    PairwiseSqDist(Var, Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape. Not `Sync`-shared: one thread builds and differentiates it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// C[m,n] (+)= A[m,k] * B[k,n] with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the caller passes slices whose lengths cover the strided
    // m×k, k×n and m×n extents; every call site below derives strides from
    // the same shapes it validated.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node, keeping the allocation.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Drops every node created after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                values,
                grad: None,
            },
            op,
            needs_grad,
        });
        Var(id)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.values, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.values, Op::Leaf, false)
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].tensor.values[0]
    }

    /// Gradient after [`Tape::backward`]; `None` for nodes off the loss path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].tensor;
        let values = t.values.iter().map(|&x| f(x)).collect();
        let shape = t.shape.clone();
        let ng = self.ng(&[a]);
        self.push(shape, values, op, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), values, Op::Add(a, b), ng))
    }

    /// `a[m,n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, cols) = self.tensor(a).rows_cols();
        if self.tensor(b).numel() != cols || self.shape(a).len() > 2 {
            return Err(mismatch("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b);
        let values = self
            .value(a)
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), values, Op::AddRow(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), values, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), values, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            &mut out,
            0.0,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// Concatenates 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutogradError::Empty("concat_cols"))?;
        let rows = self.shape(first).first().copied().unwrap_or(0);
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(mismatch("concat_cols", self.shape(first), s));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end` of a 2-d tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start > end || end > s[1] {
            return Err(AutogradError::BadSlice {
                shape: s.to_vec(),
                start,
                end,
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let w = end - start;
        let v = self.value(a);
        let out = (0..rows)
            .flat_map(|r| v[r * cols + start..r * cols + end].iter().copied())
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(vec![rows, w], out, Op::SliceCols(a, start), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.tensor(a);
        let (_, cols) = t.rows_cols();
        let mut out = t.values.clone();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let shape = t.shape.clone();
        let ng = self.ng(&[a]);
        self.push(shape, out, Op::Softmax(a), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.tensor(a);
        let (_, cols) = t.rows_cols();
        let mut out = t.values.clone();
        for row in out.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = t.shape.clone();
        let ng = self.ng(&[a]);
        self.push(shape, out, Op::LogSoftmax(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[a]);
        self.push(vec![1], vec![s], Op::Mean(a), ng)
    }

    /// Sum over the last axis: `[m,n] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.tensor(a);
        let (rows, cols) = t.rows_cols();
        let out: Vec<f64> = t.values.chunks(cols.max(1)).map(|r| r.iter().sum()).collect();
        debug_assert_eq!(out.len(), rows);
        let ng = self.ng(&[a]);
        self.push(vec![rows], out, Op::SumRows(a), ng)
    }

    /// Pairwise squared Euclidean distances between the rows of `a[m,d]`
    /// and `b[n,d]`, giving `[m,n]`. 1-d inputs are single rows.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, da) = self.tensor(a).rows_cols();
        let (rb, db) = self.tensor(b).rows_cols();
        if da != db || self.shape(a).len() > 2 || self.shape(b).len() > 2 {
            return Err(mismatch("sq_dist", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * rb);
        for i in 0..ra {
            let x = &va[i * da..(i + 1) * da];
            for j in 0..rb {
                let y = &vb[j * db..(j + 1) * db];
                out.push(x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum());
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![ra, rb], out, Op::PairwiseSqDist(a, b), ng))
    }

    /// Row lookup `table[ids[i], :]` (embedding).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(mismatch("gather_rows", s, &[ids.len()]));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutogradError::IndexOutOfRange {
                index: bad,
                len: rows,
            });
        }
        let v = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&i| v[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        let ng = self.ng(&[table]);
        Ok(self.push(vec![ids.len(), cols], out, Op::GatherRows(table, ids.to_vec()), ng))
    }

    /// Selects `a[i, cols[i]]` from each row: `[m,n] -> [m]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (rows, n) = self.tensor(a).rows_cols();
        if cols.len() != rows || self.shape(a).len() != 2 {
            return Err(mismatch("pick", self.shape(a), &[cols.len()]));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(AutogradError::IndexOutOfRange { index: bad, len: n });
        }
        let v = self.value(a);
        let out = cols.iter().enumerate().map(|(r, &c)| v[r * n + c]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(vec![rows], out, Op::Pick(a, cols.to_vec()), ng))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// ancestor that needs one; previous gradients on this tape are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if self.tensor(loss).numel() != 1 {
            return Err(AutogradError::NonScalarLoss(ls.to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for node in self.nodes.iter_mut() {
            node.tensor.grad = None;
        }
        for (id, g) in grads.into_iter().enumerate() {
            if self.nodes[id].needs_grad {
                self.nodes[id].tensor.grad = g;
            }
        }
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].tensor.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[id].tensor;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let cols = gb.len();
                    for row in g.chunks(cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    // dA[m,k] += G[m,n] * B^T
                    gemm(m, n, k, g, n as isize, 1, vb, 1, n as isize, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB[k,n] += A^T * G[m,n]
                    gemm(k, m, n, va, 1, k as isize, g, n as isize, 1, gb, 1.0);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let cols = self.shape(*a)[1];
                let (rows, w) = (out.shape[0], out.shape[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        let dst = &mut ga[r * cols + start..r * cols + start + w];
                        dst.iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Tanh(a) => self.elementwise(grads, *a, g, &out.values, |_, y| 1.0 - y * y),
            Op::Sigmoid(a) => self.elementwise(grads, *a, g, &out.values, |_, y| y * (1.0 - y)),
            Op::Exp(a) => self.elementwise(grads, *a, g, &out.values, |_, y| y),
            Op::Log(a) => self.elementwise(grads, *a, g, &out.values, |x, _| 1.0 / x),
            Op::Recip(a) => self.elementwise(grads, *a, g, &out.values, |_, y| -y * y),
            Op::Softmax(a) => {
                let (_, cols) = out.rows_cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), dr) in g
                        .chunks(cols)
                        .zip(out.values.chunks(cols))
                        .zip(ga.chunks_mut(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for i in 0..cols {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let (_, cols) = out.rows_cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), dr) in g
                        .chunks(cols)
                        .zip(out.values.chunks(cols))
                        .zip(ga.chunks_mut(cols))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for i in 0..cols {
                            dr[i] += gr[i] - yr[i].exp() * gsum;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::SumRows(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let cols = ga.len() / g.len().max(1);
                    for (row, gr) in ga.chunks_mut(cols.max(1)).zip(g) {
                        row.iter_mut().for_each(|x| *x += gr);
                    }
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (ra, d) = self.tensor(*a).rows_cols();
                let (rb, _) = self.tensor(*b).rows_cols();
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ra {
                        for j in 0..rb {
                            let gij = 2.0 * g[i * rb + j];
                            for t in 0..d {
                                ga[i * d + t] += gij * (va[i * d + t] - vb[j * d + t]);
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..ra {
                        for j in 0..rb {
                            let gij = 2.0 * g[i * rb + j];
                            for t in 0..d {
                                gb[j * d + t] -= gij * (va[i * d + t] - vb[j * d + t]);
                            }
                        }
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let cols = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        gt[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Pick(a, cols) => {
                let n = self.shape(*a)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &c) in cols.iter().enumerate() {
                        ga[r * n + c] += g[r];
                    }
                }
            }
        }
    }

    /// `d input += g * f'(x, y)` where `y` is the op's output.
    fn elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        ys: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        let xs = self.value(a);
        if let Some(ga) = self.acc(grads, a) {
            for i in 0..ga.len() {
                ga[i] += g[i] * deriv(xs[i], ys[i]);
            }
        }
    }
}
