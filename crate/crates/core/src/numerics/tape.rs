//! Eager reverse-mode differentiation over small dense matrices.
//!
//! Every op computes its value immediately and records enough to replay
//! the chain rule backwards. A tape lives for one forward/backward pass;
//! inference simply drops it.

use super::matrix::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LogSumExpCols(Var),
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    MeanRows(Var),
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    CrossEntropyDiag { input: Var, softmax: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node that needed them.
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed there.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let r = out.row_mut(i);
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in r.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in r.iter_mut() {
            *x /= s;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Every node created by [`Tape::param`], in creation order.
    pub fn params(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// Gradients of all params concatenated in creation order, zeros where
    /// nothing flowed.
    pub fn flat_param_grads(&self, grads: &Grads) -> Vec<f64> {
        let mut out = Vec::new();
        for v in self.params() {
            match grads.get(v) {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat_n(0.0, self.value(v).len())),
            }
        }
        out
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; gradients are accumulated for it.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Fixed input; no gradient is propagated into it.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a (r x c) + row (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!((1, am.cols()), rm.shape(), "add_row shape");
        let mut v = am.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(rm.as_slice()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// `a (r x c) + col (r x 1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!((am.rows(), 1), cm.shape(), "add_col shape");
        let mut v = am.clone();
        for i in 0..v.rows() {
            let c = cm.as_slice()[i];
            for x in v.row_mut(i) {
                *x += c;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(v, Op::AddCol(a, col), rg)
    }

    /// `a (r x c) * row (1 x c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!((1, am.cols()), rm.shape(), "mul_row shape");
        let mut v = am.clone();
        for i in 0..v.rows() {
            for (x, g) in v.row_mut(i).iter_mut().zip(rm.as_slice()) {
                *x *= g;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    /// `a (r x c) * col (r x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!((am.rows(), 1), cm.shape(), "mul_col shape");
        let mut v = am.clone();
        for i in 0..v.rows() {
            let c = cm.as_slice()[i];
            for x in v.row_mut(i) {
                *x *= c;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(v, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// `a / s` with `s` a `1 x 1` node.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let d = self.value(s).item();
        let v = self.value(a).map(|x| x / d);
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::DivScalar(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise log-sum-exp: `r x c -> r x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let data: Vec<f64> = am.row_iter().map(|r| lse(r.iter().copied())).collect();
        let v = Matrix::column_vector(&data);
        let rg = self.rg(a);
        self.push(v, Op::LogSumExpRows(a), rg)
    }

    /// Column-wise log-sum-exp: `r x c -> 1 x c`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let data: Vec<f64> = (0..am.cols())
            .map(|j| lse((0..am.rows()).map(|i| am[(i, j)])))
            .collect();
        let v = Matrix::row_vector(&data);
        let rg = self.rg(a);
        self.push(v, Op::LogSumExpCols(a), rg)
    }

    /// Per-row standardization (population variance), no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let am = self.value(a);
        let c = am.cols() as f64;
        let mut v = am.clone();
        let mut inv_std = Vec::with_capacity(am.rows());
        for i in 0..v.rows() {
            let r = v.row_mut(i);
            let mean = r.iter().sum::<f64>() / c;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            for x in r.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(v, Op::LayerNormRows { input: a, inv_std }, rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut v = am.clone();
        let mut norms = Vec::with_capacity(am.rows());
        for i in 0..v.rows() {
            let r = v.row_mut(i);
            let n = dot(r, r).sqrt();
            for x in r.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(v, Op::L2NormalizeRows { input: a, norms }, rg)
    }

    /// Mean over rows: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let r = am.rows() as f64;
        let data: Vec<f64> = am.col_sums().into_iter().map(|s| s / r).collect();
        let v = Matrix::row_vector(&data);
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(am.rows() * len);
        for r in am.row_iter() {
            data.extend_from_slice(&r[start..start + len]);
        }
        let v = Matrix::from_vec(am.rows(), len, data).expect("sized");
        let rg = self.rg(a);
        self.push(v, Op::SliceCols { input: a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pm = self.value(p);
                assert_eq!(pm.rows(), rows, "concat_cols row mismatch");
                let w = pm.cols();
                v.row_mut(i)[off..off + w].copy_from_slice(pm.row(i));
                off += w;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pm.as_slice());
            rows += pm.rows();
        }
        let v = Matrix::from_vec(rows, cols, data).expect("sized");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Matrix::from_vec(rows, cols, self.value(a).as_slice().to_vec())
            .expect("reshape preserves element count");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Mean cross-entropy of each row of a square logit matrix against its
    /// diagonal entry. Returns a `1 x 1` node.
    pub fn cross_entropy_diag(&mut self, logits: Var) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), lm.cols(), "cross_entropy_diag needs a square matrix");
        let n = lm.rows();
        let sm = softmax_rows(lm);
        let mut loss = 0.0;
        for i in 0..n {
            let l = lse(lm.row(i).iter().copied());
            loss += l - lm[(i, i)];
        }
        let v = Matrix::scalar(loss / n as f64);
        let rg = self.rg(logits);
        self.push(
            v,
            Op::CrossEntropyDiag {
                input: logits,
                softmax: sm,
            },
            rg,
        )
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(bm));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, am.t_matmul(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(bm, |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(am, |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, Matrix::row_vector(&g.col_sums()));
                }
            }
            Op::AddCol(a, col) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*col) {
                    self.accumulate(grads, *col, Matrix::column_vector(&g.row_sums()));
                }
            }
            Op::MulRow(a, row) => {
                let (am, rm) = (self.value(*a), self.value(*row));
                if self.rg(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (x, s) in da.row_mut(i).iter_mut().zip(rm.as_slice()) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*row) {
                    let mut dr = vec![0.0; am.cols()];
                    for i in 0..am.rows() {
                        for ((d, x), gi) in dr.iter_mut().zip(am.row(i)).zip(g.row(i)) {
                            *d += x * gi;
                        }
                    }
                    self.accumulate(grads, *row, Matrix::row_vector(&dr));
                }
            }
            Op::MulCol(a, col) => {
                let (am, cm) = (self.value(*a), self.value(*col));
                if self.rg(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let s = cm.as_slice()[i];
                        for x in da.row_mut(i) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*col) {
                    let dc: Vec<f64> = (0..am.rows()).map(|i| dot(am.row(i), g.row(i))).collect();
                    self.accumulate(grads, *col, Matrix::column_vector(&dc));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::DivScalar(a, s) => {
                let d = self.value(*s).item();
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.scale(1.0 / d));
                }
                if self.rg(*s) {
                    let am = self.value(*a);
                    let ds = -dot(g.as_slice(), am.as_slice()) / (d * d);
                    self.accumulate(grads, *s, Matrix::scalar(ds));
                }
            }
            Op::Relu(a) => {
                let am = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(am, |gi, x| if x > 0.0 { gi } else { 0.0 }));
            }
            Op::Gelu(a) => {
                let am = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(am, |gi, x| gi * gelu_grad(x)));
            }
            Op::Softplus(a) => {
                let am = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(am, |gi, x| gi * sigmoid(x)));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * yi)),
            Op::SoftmaxRows(a) => {
                let mut da = g.clone();
                for i in 0..y.rows() {
                    let s = dot(g.row(i), y.row(i));
                    for (d, yi) in da.row_mut(i).iter_mut().zip(y.row(i)) {
                        *d = yi * (*d - s);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LogSumExpRows(a) => {
                let am = self.value(*a);
                let mut da = am.clone();
                for i in 0..am.rows() {
                    let (l, gi) = (y.as_slice()[i], g.as_slice()[i]);
                    for x in da.row_mut(i) {
                        *x = gi * (*x - l).exp();
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LogSumExpCols(a) => {
                let am = self.value(*a);
                let mut da = am.clone();
                for i in 0..am.rows() {
                    for (j, x) in da.row_mut(i).iter_mut().enumerate() {
                        *x = g.as_slice()[j] * (*x - y.as_slice()[j]).exp();
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNormRows { input, inv_std } => {
                let c = y.cols() as f64;
                let mut da = g.clone();
                for i in 0..y.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = dot(gr, yr) / c;
                    let is = inv_std[i];
                    for ((d, gi), yi) in da.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *d = is * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.accumulate(grads, *input, da);
            }
            Op::L2NormalizeRows { input, norms } => {
                let mut da = g.clone();
                for i in 0..y.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let s = dot(gr, yr);
                    let n = norms[i];
                    for ((d, gi), yi) in da.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *d = (gi - yi * s) / n;
                    }
                }
                self.accumulate(grads, *input, da);
            }
            Op::MeanRows(a) => {
                let am = self.value(*a);
                let r = am.rows();
                let mut da = Matrix::zeros(r, am.cols());
                for i in 0..r {
                    for (d, gi) in da.row_mut(i).iter_mut().zip(g.as_slice()) {
                        *d = gi / r as f64;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceCols { input, start } => {
                let am = self.value(*input);
                let mut da = Matrix::zeros(am.rows(), am.cols());
                let w = g.cols();
                for i in 0..am.rows() {
                    da.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *input, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut dp = Matrix::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.rg(p) {
                        let dp = Matrix::from_vec(r, c, g.as_slice()[off * c..(off + r) * c].to_vec())
                            .expect("sized");
                        self.accumulate(grads, p, dp);
                    }
                    off += r;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                let dp = Matrix::from_vec(r, c, g.as_slice().to_vec()).expect("sized");
                self.accumulate(grads, *a, dp);
            }
            Op::CrossEntropyDiag { input, softmax } => {
                let n = softmax.rows();
                let scale = g.item() / n as f64;
                let mut da = softmax.clone();
                for i in 0..n {
                    da[(i, i)] -= 1.0;
                }
                self.accumulate(grads, *input, da.scale(scale));
            }
        }
    }
}
