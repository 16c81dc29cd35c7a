use super::tensor::{CsrMatrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BCE_EPS: f64 = 1e-7;
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SparseMatMul(usize, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    RowL1Normalize(Var),
    BatchedVecMat(Var, Var),
    Bce(Var, Vec<f64>, Vec<f64>),
    RowEntropy(Var),
    MeanRows(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape is acyclic by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    sparse: Vec<CsrMatrix>,
}

/// Gradients produced by [`Tape::backward`]; `None` for nodes the loss does not depend on.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let v = ta.matmul(tb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), v, ng))
    }

    /// Constant sparse input times a dense variable.
    pub fn sparse_matmul(&mut self, x: CsrMatrix, w: Var) -> Result<Var> {
        let tw = self.value(w);
        if x.cols() != tw.rows() {
            return Err(shape_err("sparse_matmul", format!("{} columns vs {:?}", x.cols(), tw.shape())));
        }
        let v = x.matmul(tw);
        self.sparse.push(x);
        let ng = self.ng(w);
        Ok(self.push(Op::SparseMatMul(self.sparse.len() - 1, w), v, ng))
    }

    /// `a + b` with `b` a `1 x m` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::AddRow(a, b), v, ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(Op::Scale(a, c), v, ng)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(shape_err("add_const", format!("{:?} vs {:?}", ta.shape(), c.shape())));
        }
        let mut v = ta.clone();
        v.add_assign(c);
        let ng = self.ng(a);
        Ok(self.push(Op::AddConst(a), v, ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(Op::Sigmoid(a), v, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(Op::Tanh(a), v, ng)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(Op::Gelu(a), v, ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(Op::Softplus(a), v, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", format!("{:?} | {:?}", ta.shape(), tb.shape())));
        }
        let cols = ta.cols() + tb.cols();
        let mut data = Vec::with_capacity(ta.rows() * cols);
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let v = Tensor::from_vec(ta.rows(), cols, data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::ConcatCols(a, b), v, ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * ta.cols());
        for &i in &idx {
            if i >= ta.rows() {
                return Err(shape_err("gather_rows", format!("row {i} of {}", ta.rows())));
            }
            data.extend_from_slice(ta.row(i));
        }
        let v = Tensor::from_vec(idx.len(), ta.cols(), data)?;
        let ng = self.ng(a);
        Ok(self.push(Op::GatherRows(a, idx), v, ng))
    }

    /// First `n` rows of `a`.
    pub fn slice_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ta = self.value(a);
        if n > ta.rows() {
            return Err(shape_err("slice_rows", format!("{n} rows of {}", ta.rows())));
        }
        let v = Tensor::from_vec(n, ta.cols(), ta.data()[..n * ta.cols()].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(Op::SliceRows(a, n), v, ng))
    }

    /// Divide every row by its l1 norm; a norm below [`NORM_EPS`] is a degeneracy error.
    pub fn row_l1_normalize(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let s: f64 = row.iter().map(|x| x.abs()).sum();
            if !(s >= NORM_EPS) {
                return Err(Error::Degenerate("state distribution l1 norm below epsilon"));
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Op::RowL1Normalize(a), v, ng))
    }

    /// Row-wise vector-matrix product: `q` is `B x Q`, `m` is `B x (Q*Q)` holding one row-major
    /// `Q x Q` matrix per row; the result row `b` is `q_b * M_b`.
    pub fn batched_vec_mat(&mut self, q: Var, m: Var) -> Result<Var> {
        let (tq, tm) = (self.value(q), self.value(m));
        let nq = tq.cols();
        if tq.rows() != tm.rows() || tm.cols() != nq * nq {
            return Err(shape_err("batched_vec_mat", format!("{:?} with {:?}", tq.shape(), tm.shape())));
        }
        let mut v = Tensor::zeros(tq.rows(), nq);
        for b in 0..tq.rows() {
            let (qr, mr) = (tq.row(b), tm.row(b));
            let out = v.row_mut(b);
            for (i, &qi) in qr.iter().enumerate() {
                for (o, &mij) in out.iter_mut().zip(&mr[i * nq..(i + 1) * nq]) {
                    *o += qi * mij;
                }
            }
        }
        let ng = self.ng(q) || self.ng(m);
        Ok(self.push(Op::BatchedVecMat(q, m), v, ng))
    }

    /// `sum_i w_i * BCE(s_i, p_i)` over the elements of `scores`, with scores clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`. Clamped elements receive zero gradient.
    pub fn weighted_bce(&mut self, scores: Var, labels: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let ts = self.value(scores);
        let n = ts.data().len();
        if labels.len() != n || weights.len() != n {
            return Err(shape_err(
                "weighted_bce",
                format!("{n} scores, {} labels, {} weights", labels.len(), weights.len()),
            ));
        }
        let mut total = 0.0;
        for ((&s, &p), &w) in ts.data().iter().zip(&labels).zip(&weights) {
            if w == 0.0 {
                continue;
            }
            let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
            total -= w * (p * s.ln() + (1.0 - p) * (1.0 - s).ln());
        }
        let ng = self.ng(scores);
        Ok(self.push(Op::Bce(scores, labels, weights), Tensor::scalar(total), ng))
    }

    /// Shannon entropy (natural log) of every row; `n x 1`.
    pub fn row_entropy(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows()).map(|r| entropy(ta.row(r))).collect();
        let v = Tensor::from_vec(ta.rows(), 1, data).expect("shape");
        let ng = self.ng(a);
        self.push(Op::RowEntropy(a), v, ng)
    }

    /// Column means; `1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() == 0 {
            return Err(shape_err("mean_rows", "no rows".into()));
        }
        let mut v = Tensor::zeros(1, ta.cols());
        for r in 0..ta.rows() {
            for (o, x) in v.data_mut().iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let n = ta.rows() as f64;
        for o in v.data_mut() {
            *o /= n;
        }
        let ng = self.ng(a);
        Ok(self.push(Op::MeanRows(a), v, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(a);
        self.push(Op::Sum(a), v, ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).shape() != (1, 1) {
            return Err(shape_err("backward", format!("loss shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::SparseMatMul(x, w) => {
                let tw = self.value(*w);
                let mut gw = Tensor::zeros(tw.rows(), tw.cols());
                self.sparse[*x].t_matmul_into(g, &mut gw);
                self.acc(grads, *w, gw);
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, zip_map(g, tb, |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, zip_map(g, ta, |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|x| x * c)),
            Op::AddConst(a) => self.acc(grads, *a, g.clone()),
            Op::Sigmoid(a) => self.acc(grads, *a, zip_map(g, out, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => self.acc(grads, *a, zip_map(g, out, |x, y| x * (1.0 - y * y))),
            Op::Gelu(a) => self.acc(grads, *a, zip_map(g, self.value(*a), |x, y| x * gelu_grad(y))),
            Op::Softplus(a) => self.acc(grads, *a, zip_map(g, self.value(*a), |x, y| x * sigmoid(y))),
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut ga = Tensor::zeros(g.rows(), ca);
                let mut gb = Tensor::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SliceRows(a, n) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                ga.data_mut()[..n * ta.cols()].copy_from_slice(g.data());
                self.acc(grads, *a, ga);
            }
            Op::RowL1Normalize(a) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    let x = ta.row(r);
                    let s: f64 = x.iter().map(|v| v.abs()).sum();
                    let dot: f64 = g.row(r).iter().zip(x).map(|(gi, xi)| gi * xi).sum();
                    for ((o, &gi), &xi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(x) {
                        let sign = if xi > 0.0 {
                            1.0
                        } else if xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *o = gi / s - sign * dot / (s * s);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::BatchedVecMat(q, m) => {
                let (tq, tm) = (self.value(*q), self.value(*m));
                let nq = tq.cols();
                let mut gq = Tensor::zeros(tq.rows(), nq);
                let mut gm = Tensor::zeros(tm.rows(), tm.cols());
                for b in 0..tq.rows() {
                    let (qr, mr, gr) = (tq.row(b), tm.row(b), g.row(b));
                    for i in 0..nq {
                        let mrow = &mr[i * nq..(i + 1) * nq];
                        gq.row_mut(b)[i] = mrow.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for (o, &gj) in gm.row_mut(b)[i * nq..(i + 1) * nq].iter_mut().zip(gr) {
                            *o = qr[i] * gj;
                        }
                    }
                }
                if self.ng(*q) {
                    self.acc(grads, *q, gq);
                }
                if self.ng(*m) {
                    self.acc(grads, *m, gm);
                }
            }
            Op::Bce(s, labels, weights) => {
                let ts = self.value(*s);
                let go = g.item();
                let data = ts
                    .data()
                    .iter()
                    .zip(labels)
                    .zip(weights)
                    .map(|((&x, &p), &w)| {
                        if w == 0.0 || x <= BCE_EPS || x >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            go * w * (-p / x + (1.0 - p) / (1.0 - x))
                        }
                    })
                    .collect();
                self.acc(grads, *s, Tensor::from_vec(ts.rows(), ts.cols(), data).expect("shape"));
            }
            Op::RowEntropy(a) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    let gr = g.get(r, 0);
                    for (o, &p) in ga.row_mut(r).iter_mut().zip(ta.row(r)) {
                        let lp = if p > 0.0 { p.ln() } else { f64::MIN_POSITIVE.ln() };
                        *o = -(lp + 1.0) * gr;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let n = ta.rows() as f64;
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = x / n;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let go = g.item();
                self.acc(grads, *a, Tensor::from_vec(ta.rows(), ta.cols(), vec![go; ta.data().len()]).expect("shape"));
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shape")
}
