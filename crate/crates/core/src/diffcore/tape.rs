//! Eager tape-based reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node that
//! remembers its operands. [`Tape::backward`] walks the nodes in reverse
//! recording order and accumulates adjoints into the [`ParameterSet`] that
//! supplied the parameter leaves.
//!
//! The only non-finite values allowed on a tape are `-inf` mask entries fed
//! to [`Tape::softmax`], [`Tape::log_softmax`] and [`Tape::entropy`].

use super::params::{ParamId, ParameterSet};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log1p,
    Softplus,
    Relu,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatVec(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddCol(Var, Var),
    Column(Var, usize),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Entropy(Var),
    Index(Var, usize),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Reshape(Var),
    OuterAdd(Var, Var),
    SelectCols(Var, Vec<usize>),
    GroupCombine(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    EntropyRows(Var),
    GatherRows(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => Vec::new(),
            Op::MatVec(a, b)
            | Op::MatMul(a, b)
            | Op::AddCol(a, b)
            | Op::Binary(_, a, b)
            | Op::Dot(a, b)
            | Op::Minimum(a, b)
            | Op::OuterAdd(a, b)
            | Op::GroupCombine(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Column(a, _)
            | Op::Scale(a, _)
            | Op::Unary(_, a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Entropy(a)
            | Op::Index(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Clamp(a, _, _)
            | Op::Reshape(a)
            | Op::SelectCols(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::EntropyRows(a)
            | Op::GatherRows(a, _) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    // whether any parameter leaf is reachable from this node
    needs: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs = matches!(op, Op::Param(_)) || op.inputs().iter().any(|v| self.nodes[v.0].needs);
        self.nodes.push(Node { value, op, needs });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(Tensor::scalar(value), Op::Constant)
    }

    /// Reads a parameter onto the tape. Gradients flow back into `params`
    /// when [`Tape::backward`] is called with the same set.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let y = tensor::matvec(self.value(w), self.value(x))?;
        Ok(self.push(y, Op::MatVec(w, x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(c, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = tensor::transpose(self.value(a))?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    /// Adds the vector `u: [m]` to every column of `m: [m x p]`.
    pub fn add_col(&mut self, m: Var, u: Var) -> Result<Var> {
        let (mv, uv) = (self.value(m), self.value(u));
        if !mv.is_matrix() || uv.len() != mv.rows() {
            return Err(Error::contract(format!(
                "add_col shapes {:?} + {:?}",
                mv.shape(),
                uv.shape()
            )));
        }
        let p = mv.cols();
        let mut out = mv.data().to_vec();
        for (i, row) in out.chunks_exact_mut(p.max(1)).enumerate() {
            let ui = uv.data()[i];
            row.iter_mut().for_each(|v| *v += ui);
        }
        let value = Tensor::new(mv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddCol(m, u)))
    }

    /// Column `j` of a matrix, as a vector.
    pub fn column(&mut self, m: Var, j: usize) -> Result<Var> {
        let mv = self.value(m);
        if !mv.is_matrix() || j >= mv.cols() {
            return Err(Error::contract(format!(
                "column {j} of shape {:?}",
                mv.shape()
            )));
        }
        let p = mv.cols();
        let col = (0..mv.rows()).map(|i| mv.data()[i * p + j]).collect();
        Ok(self.push(Tensor::vector(col), Op::Column(m, j)))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(av, bv)?;
        let n = av.len().max(bv.len());
        let pick = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data = (0..n).map(|i| f(pick(av, i), pick(bv, i))).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let av = self.value(a);
        if kind == Unary::Log1p && av.data().iter().any(|&v| v <= -1.0) {
            return Err(Error::Domain("log1p argument <= -1".into()));
        }
        let value = av.map(|x| match kind {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => tensor::sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log1p => x.ln_1p(),
            Unary::Softplus => tensor::softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
        });
        Ok(self.push(value, Op::Unary(kind, a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }

    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log1p, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a).expect("softplus is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square is total")
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let p = tensor::softmax(self.value(logits).data())?;
        let shape = self.value(logits).shape().to_vec();
        Ok(self.push(Tensor::new(shape, p)?, Op::Softmax(logits)))
    }

    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        let lp = tensor::log_softmax(self.value(logits).data())?;
        let shape = self.value(logits).shape().to_vec();
        Ok(self.push(Tensor::new(shape, lp)?, Op::LogSoftmax(logits)))
    }

    /// Shannon entropy (nats) of the categorical distribution `softmax(logits)`.
    pub fn entropy(&mut self, logits: Var) -> Result<Var> {
        let lp = tensor::log_softmax(self.value(logits).data())?;
        let h = -lp
            .iter()
            .filter(|v| v.is_finite())
            .map(|&l| l.exp() * l)
            .sum::<f64>();
        Ok(self.push(Tensor::scalar(h), Op::Entropy(logits)))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let av = self.value(a);
        if i >= av.len() {
            return Err(Error::contract(format!("index {i} of length {}", av.len())));
        }
        let v = av.data()[i];
        Ok(self.push(Tensor::scalar(v), Op::Index(a, i)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::contract(format!(
                "dot lengths {} and {}",
                av.len(),
                bv.len()
            )));
        }
        let d = tensor::dot(av.data(), bv.data());
        Ok(self.push(Tensor::scalar(d), Op::Dot(a, b)))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::contract("minimum operands differ in length"));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x.min(*y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Minimum(a, b)))
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// `a: [m x k]`, `b: [m x x]` to `[m x (k*x)]` with column `kk*x + j`
    /// holding `a[:, kk] + b[:, j]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.rows() != bv.rows() {
            return Err(Error::contract(format!(
                "outer_add shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, x) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(m * k * x);
        for i in 0..m {
            let brow = &bv.data()[i * x..(i + 1) * x];
            for kk in 0..k {
                let aik = av.data()[i * k + kk];
                out.extend(brow.iter().map(|b| aik + b));
            }
        }
        let value = Tensor::matrix(m, k * x, out)?;
        Ok(self.push(value, Op::OuterAdd(a, b)))
    }

    /// Columns `idx` of a matrix, in order (repeats allowed).
    pub fn select_cols(&mut self, m: Var, idx: &[usize]) -> Result<Var> {
        let mv = self.value(m);
        if !mv.is_matrix() || idx.iter().any(|&j| j >= mv.cols()) {
            return Err(Error::contract(format!(
                "select_cols {idx:?} of shape {:?}",
                mv.shape()
            )));
        }
        let (rows, cols) = (mv.rows(), mv.cols());
        let data = (0..rows)
            .flat_map(|i| idx.iter().map(move |&j| i * cols + j))
            .map(|o| mv.data()[o])
            .collect();
        let value = Tensor::matrix(rows, idx.len(), data)?;
        Ok(self.push(value, Op::SelectCols(m, idx.to_vec())))
    }

    /// Weighted column sums per group: `f: [d x (k*t)]`, `w: [k x t]` to
    /// `[d x k]` with column `kk` equal to `sum_t w[kk, t] * f[:, kk*t + t]`.
    pub fn group_combine(&mut self, f: Var, w: Var) -> Result<Var> {
        let (fv, wv) = (self.value(f), self.value(w));
        if !fv.is_matrix() || !wv.is_matrix() || fv.cols() != wv.len() {
            return Err(Error::contract(format!(
                "group_combine shapes {:?} and {:?}",
                fv.shape(),
                wv.shape()
            )));
        }
        let (d, n) = (fv.rows(), fv.cols());
        let (k, t) = (wv.rows(), wv.cols());
        let mut out = vec![0.0; d * k];
        for i in 0..d {
            for kk in 0..k {
                out[i * k + kk] = (0..t)
                    .map(|tt| wv.data()[kk * t + tt] * fv.data()[i * n + kk * t + tt])
                    .sum();
            }
        }
        let value = Tensor::matrix(d, k, out)?;
        Ok(self.push(value, Op::GroupCombine(f, w)))
    }

    fn rowwise(&self, z: Var, what: &str) -> Result<(usize, usize)> {
        let zv = self.value(z);
        if !zv.is_matrix() || zv.cols() == 0 {
            return Err(Error::contract(format!("{what} of shape {:?}", zv.shape())));
        }
        Ok((zv.rows(), zv.cols()))
    }

    /// Softmax of each row of a matrix.
    pub fn softmax_rows(&mut self, z: Var) -> Result<Var> {
        let (r, c) = self.rowwise(z, "softmax_rows")?;
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(z).data().chunks_exact(c) {
            out.extend(tensor::softmax(row)?);
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::SoftmaxRows(z)))
    }

    pub fn log_softmax_rows(&mut self, z: Var) -> Result<Var> {
        let (r, c) = self.rowwise(z, "log_softmax_rows")?;
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(z).data().chunks_exact(c) {
            out.extend(tensor::log_softmax(row)?);
        }
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::LogSoftmaxRows(z)))
    }

    /// Entropy (nats) of the softmax of each row; a vector of length `rows`.
    pub fn entropy_rows(&mut self, z: Var) -> Result<Var> {
        let (_, c) = self.rowwise(z, "entropy_rows")?;
        let mut out = Vec::new();
        for row in self.value(z).data().chunks_exact(c) {
            let lp = tensor::log_softmax(row)?;
            out.push(-lp.iter().filter(|v| v.is_finite()).map(|&l| l.exp() * l).sum::<f64>());
        }
        Ok(self.push(Tensor::vector(out), Op::EntropyRows(z)))
    }

    /// Entry `idx[r]` of each row `r`; a vector of length `rows`.
    pub fn gather_rows(&mut self, z: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rowwise(z, "gather_rows")?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::contract(format!("gather_rows {idx:?} from [{r} x {c}]")));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| self.value(z).data()[i * c + j]).collect();
        Ok(self.push(Tensor::vector(data), Op::GatherRows(z, idx.to_vec())))
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let first = *iter
            .next()
            .ok_or_else(|| Error::contract("add_all of no terms"))?;
        iter.try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Back-propagates from the scalar `loss`, accumulating (`+=`) into the
    /// gradient buffers of `params`. Returns the number of nodes visited.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet) -> Result<usize> {
        if !self.value(loss).is_scalar_like() {
            return Err(Error::contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            visited += 1;
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs {
                continue;
            }
            self.propagate(node, &g, &mut adj, params);
        }
        Ok(visited)
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        params: &mut ParameterSet,
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let val_t = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => params.accumulate(*id, g),
            Op::MatVec(w, x) => {
                let (wv, xv) = (val(*w), val(*x));
                let n = xv.len();
                if self.needs(*w) {
                    let mut dw = vec![0.0; wv.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let drow = &mut dw[i * n..(i + 1) * n];
                        for j in 0..n {
                            drow[j] = gi * xv[j];
                        }
                    }
                    add_adj(adj, *w, &dw);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; n];
                    for (i, &gi) in g.iter().enumerate() {
                        let row = &wv[i * n..(i + 1) * n];
                        for j in 0..n {
                            dx[j] += gi * row[j];
                        }
                    }
                    add_adj(adj, *x, &dx);
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, n, p) = (at.rows(), at.cols(), bt.cols());
                let (av, bv) = (at.data(), bt.data());
                // dA = G B^T, dB = A^T G
                if self.needs(*a) {
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let grow = &g[i * p..(i + 1) * p];
                        for k in 0..n {
                            da[i * n + k] = tensor::dot(grow, &bv[k * p..(k + 1) * p]);
                        }
                    }
                    add_adj(adj, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * p];
                    for i in 0..m {
                        let grow = &g[i * p..(i + 1) * p];
                        for k in 0..n {
                            let aik = av[i * n + k];
                            if aik != 0.0 {
                                let dbrow = &mut db[k * p..(k + 1) * p];
                                for (d, &gv) in dbrow.iter_mut().zip(grow) {
                                    *d += aik * gv;
                                }
                            }
                        }
                    }
                    add_adj(adj, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let out = &node.value;
                let (r, c) = (out.rows(), out.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = g[i * c + j];
                    }
                }
                add_adj(adj, *a, &da);
            }
            Op::AddCol(m, u) => {
                let p = node.value.cols();
                let du: Vec<f64> = g.chunks_exact(p.max(1)).map(|row| row.iter().sum()).collect();
                add_adj(adj, *m, g);
                add_adj(adj, *u, &du);
            }
            Op::Column(m, j) => {
                let mt = &self.nodes[m.0].value;
                let p = mt.cols();
                let mut dm = vec![0.0; mt.len()];
                for (i, &gi) in g.iter().enumerate() {
                    dm[i * p + j] = gi;
                }
                add_adj(adj, *m, &dm);
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let pick = |t: &[f64], i: usize| if t.len() == 1 { t[0] } else { t[i] };
                let (da, db): (Vec<f64>, Vec<f64>) = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| match kind {
                        Binary::Add => (gi, gi),
                        Binary::Sub => (gi, -gi),
                        Binary::Mul => (gi * pick(bv, i), gi * pick(av, i)),
                    })
                    .unzip();
                add_adj(adj, *a, &reduce_broadcast(da, av.len()));
                add_adj(adj, *b, &reduce_broadcast(db, bv.len()));
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                add_adj(adj, *a, &da);
            }
            Op::Unary(kind, a) => {
                let (x, y) = (val(*a), node.value.data());
                let da: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let d = match kind {
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Exp => y[i],
                            Unary::Log1p => 1.0 / (1.0 + x[i]),
                            Unary::Softplus => tensor::sigmoid(x[i]),
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x[i],
                        };
                        gi * d
                    })
                    .collect();
                add_adj(adj, *a, &da);
            }
            Op::Softmax(z) => {
                let p = node.value.data();
                let gp = tensor::dot(g, p);
                let dz: Vec<f64> = p.iter().zip(g).map(|(pi, gi)| pi * (gi - gp)).collect();
                add_adj(adj, *z, &dz);
            }
            Op::LogSoftmax(z) => {
                let lp = node.value.data();
                let gsum: f64 = lp
                    .iter()
                    .zip(g)
                    .filter(|(l, _)| l.is_finite())
                    .map(|(_, gi)| gi)
                    .sum();
                let dz: Vec<f64> = lp
                    .iter()
                    .zip(g)
                    .map(|(l, gi)| if l.is_finite() { gi - l.exp() * gsum } else { 0.0 })
                    .collect();
                add_adj(adj, *z, &dz);
            }
            Op::Entropy(z) => {
                let h = node.value.data()[0];
                let lp = tensor::log_softmax(val(*z)).expect("checked in forward");
                let dz: Vec<f64> = lp
                    .iter()
                    .map(|&l| if l.is_finite() { -g[0] * l.exp() * (l + h) } else { 0.0 })
                    .collect();
                add_adj(adj, *z, &dz);
            }
            Op::Index(a, i) => {
                let mut da = vec![0.0; val(*a).len()];
                da[*i] = g[0];
                add_adj(adj, *a, &da);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    add_adj(adj, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Sum(a) => {
                let da = vec![g[0]; val(*a).len()];
                add_adj(adj, *a, &da);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let da = vec![g[0] / n as f64; n];
                add_adj(adj, *a, &da);
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da: Vec<f64> = bv.iter().map(|v| v * g[0]).collect();
                let db: Vec<f64> = av.iter().map(|v| v * g[0]).collect();
                add_adj(adj, *a, &da);
                add_adj(adj, *b, &db);
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                let da: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > *lo && xi < *hi { gi } else { 0.0 })
                    .collect();
                add_adj(adj, *a, &da);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..g.len() {
                    if av[i] <= bv[i] {
                        da[i] = g[i];
                    } else {
                        db[i] = g[i];
                    }
                }
                add_adj(adj, *a, &da);
                add_adj(adj, *b, &db);
            }
            Op::Reshape(a) => add_adj(adj, *a, g),
            Op::OuterAdd(a, b) => {
                let (k, x) = (val_t(*a).cols(), val_t(*b).cols());
                let m = val_t(*a).rows();
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; m * x];
                for i in 0..m {
                    for kk in 0..k {
                        let grow = &g[(i * k + kk) * x..(i * k + kk + 1) * x];
                        da[i * k + kk] = grow.iter().sum();
                        for (d, &gv) in db[i * x..(i + 1) * x].iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
                add_adj(adj, *a, &da);
                add_adj(adj, *b, &db);
            }
            Op::SelectCols(m, idx) => {
                let mt = val_t(*m);
                let (rows, cols, k) = (mt.rows(), mt.cols(), idx.len());
                let mut dm = vec![0.0; rows * cols];
                for i in 0..rows {
                    for (c, &j) in idx.iter().enumerate() {
                        dm[i * cols + j] += g[i * k + c];
                    }
                }
                add_adj(adj, *m, &dm);
            }
            Op::GroupCombine(f, w) => {
                let (ft, wt) = (val_t(*f), val_t(*w));
                let (d, n) = (ft.rows(), ft.cols());
                let (k, t) = (wt.rows(), wt.cols());
                let (fv, wv) = (ft.data(), wt.data());
                if self.needs(*f) {
                    let mut df = vec![0.0; d * n];
                    for i in 0..d {
                        for kk in 0..k {
                            let gi = g[i * k + kk];
                            for tt in 0..t {
                                df[i * n + kk * t + tt] = wv[kk * t + tt] * gi;
                            }
                        }
                    }
                    add_adj(adj, *f, &df);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * t];
                    for i in 0..d {
                        for kk in 0..k {
                            let gi = g[i * k + kk];
                            for tt in 0..t {
                                dw[kk * t + tt] += fv[i * n + kk * t + tt] * gi;
                            }
                        }
                    }
                    add_adj(adj, *w, &dw);
                }
            }
            Op::SoftmaxRows(z) => {
                let p = node.value.data();
                let c = node.value.cols();
                let mut dz = vec![0.0; p.len()];
                for ((prow, grow), drow) in p.chunks_exact(c).zip(g.chunks_exact(c)).zip(dz.chunks_exact_mut(c)) {
                    let gp = tensor::dot(grow, prow);
                    for ((d, pi), gi) in drow.iter_mut().zip(prow).zip(grow) {
                        *d = pi * (gi - gp);
                    }
                }
                add_adj(adj, *z, &dz);
            }
            Op::LogSoftmaxRows(z) => {
                let lp = node.value.data();
                let c = node.value.cols();
                let mut dz = vec![0.0; lp.len()];
                for ((lrow, grow), drow) in lp.chunks_exact(c).zip(g.chunks_exact(c)).zip(dz.chunks_exact_mut(c)) {
                    let gsum: f64 = lrow.iter().zip(grow).filter(|(l, _)| l.is_finite()).map(|(_, gi)| gi).sum();
                    for ((d, l), gi) in drow.iter_mut().zip(lrow).zip(grow) {
                        if l.is_finite() {
                            *d = gi - l.exp() * gsum;
                        }
                    }
                }
                add_adj(adj, *z, &dz);
            }
            Op::EntropyRows(z) => {
                let zt = val_t(*z);
                let c = zt.cols();
                let mut dz = vec![0.0; zt.len()];
                for (r, (zrow, drow)) in zt.data().chunks_exact(c).zip(dz.chunks_exact_mut(c)).enumerate() {
                    let h = node.value.data()[r];
                    let lp = tensor::log_softmax(zrow).expect("checked in forward");
                    for (d, &l) in drow.iter_mut().zip(&lp) {
                        if l.is_finite() {
                            *d = -g[r] * l.exp() * (l + h);
                        }
                    }
                }
                add_adj(adj, *z, &dz);
            }
            Op::GatherRows(z, idx) => {
                let zt = val_t(*z);
                let c = zt.cols();
                let mut dz = vec![0.0; zt.len()];
                for (r, &j) in idx.iter().enumerate() {
                    dz[r * c + j] = g[r];
                }
                add_adj(adj, *z, &dz);
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }
}

fn add_adj(adj: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn reduce_broadcast(d: Vec<f64>, target_len: usize) -> Vec<f64> {
    if target_len == 1 && d.len() != 1 {
        vec![d.iter().sum()]
    } else {
        d
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.len() == b.len() {
        Ok(if a.shape().len() >= b.shape().len() {
            a.shape().to_vec()
        } else {
            b.shape().to_vec()
        })
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else if b.len() == 1 {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::contract(format!(
            "cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        )))
    }
}
