use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{gemm, DenseMatrix};

use super::params::ParamStore;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Weighted edge list used by [`Tape::aggregate`]: `(src, dst, weight)`.
pub type EdgeList = Arc<[(usize, usize, f64)]>;

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Affine { x: Var, w: Var, b: Var },
    Swish { x: Var },
    LinComb(Vec<(Var, f64)>),
    StackLinComb(Vec<Vec<(Var, f64)>>),
    ConcatCols { a: Var, b: Var },
    Tile { x: Var, reps: usize },
    Aggregate { x: Var, edges: EdgeList, block: usize },
    Reshape { x: Var },
    LogSoftmaxRows { x: Var },
    SoftmaxRows { x: Var },
    Gather { x: Var, index: Vec<(usize, usize)> },
    Sum { x: Var },
    Scale { x: Var, c: f64 },
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one reverse sweep.
///
/// Every operation evaluates eagerly and appends a node; the node order is
/// a topological order, so the backward pass is a single reverse scan.
/// Nodes that depend on no parameter are marked and skipped on the way
/// back.
#[derive(Debug, Default)]
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

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: DenseMatrix, op: Op, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Constant, &[])
    }

    /// Records the current value of parameter `name`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))?
            .clone();
        Ok(self.push(value, Op::Param(name.to_string()), &[]))
    }

    /// `x W + b` with `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [1, d_out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d_in) = self.shape(x);
        let (wi, d_out) = self.shape(w);
        if wi != d_in || self.shape(b) != (1, d_out) {
            return Err(Error::shape(format!(
                "affine: x {n}x{d_in}, W {wi}x{d_out}, b {:?}",
                self.shape(b)
            )));
        }
        let mut out = DenseMatrix::zeros(n, d_out);
        let bias = self.value(b).data();
        for i in 0..n {
            out.row_mut(i).copy_from_slice(bias);
        }
        gemm(1.0, self.value(x), false, self.value(w), false, 1.0, &mut out);
        Ok(self.push(out, Op::Affine { x, w, b }, &[x, w, b]))
    }

    /// Elementwise `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Swish { x }, &[x])
    }

    /// `sum_i c_i * v_i` over same-shaped values.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::shape("empty linear combination"))?;
        let shape = self.shape(first);
        let mut out = DenseMatrix::zeros(shape.0, shape.1);
        for &(v, c) in terms {
            if self.shape(v) != shape {
                return Err(Error::shape(format!(
                    "lin_comb: {:?} vs {shape:?}",
                    self.shape(v)
                )));
            }
            out.add_scaled(c, self.value(v));
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(out, Op::LinComb(terms.to_vec()), &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lin_comb(&[(a, 1.0), (b, 1.0)])
    }

    /// Vertically stacks blocks, each a linear combination of same-shaped
    /// values. A single-term block with coefficient 1 copies its value
    /// bit-for-bit.
    pub fn stack_lin_comb(&mut self, blocks: Vec<Vec<(Var, f64)>>) -> Result<Var> {
        let first = blocks
            .first()
            .and_then(|b| b.first())
            .ok_or_else(|| Error::shape("empty stack"))?
            .0;
        let (r, c) = self.shape(first);
        let mut out = DenseMatrix::zeros(r * blocks.len(), c);
        let mut parents = Vec::new();
        for (bi, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::shape("empty block in stack"));
            }
            let dst = &mut out.data_mut()[bi * r * c..(bi + 1) * r * c];
            for &(v, coef) in block {
                let src = self.nodes[v.0].value.data();
                if src.len() != r * c {
                    return Err(Error::shape("stack blocks differ in shape"));
                }
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += coef * s;
                }
                parents.push(v);
            }
        }
        Ok(self.push(out, Op::StackLinComb(blocks), &parents))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::shape(format!("concat_cols: {ra} vs {rb} rows")));
        }
        let mut out = DenseMatrix::zeros(ra, ca + cb);
        for i in 0..ra {
            let row = out.row_mut(i);
            row[..ca].copy_from_slice(self.nodes[a.0].value.row(i));
            row[ca..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        Ok(self.push(out, Op::ConcatCols { a, b }, &[a, b]))
    }

    /// Repeats `x` vertically `reps` times.
    pub fn tile(&mut self, x: Var, reps: usize) -> Var {
        let v = self.value(x);
        let mut data = Vec::with_capacity(v.len() * reps);
        for _ in 0..reps {
            data.extend_from_slice(v.data());
        }
        let out = DenseMatrix::from_vec(v.rows() * reps, v.cols(), data).unwrap();
        self.push(out, Op::Tile { x, reps }, &[x])
    }

    /// GIN-style sum aggregation with `epsilon = 0`, applied independently
    /// to each `block`-row slab of `x`: row `v` becomes
    /// `x_v + sum_{(u, v, w)} w * x_u`. Edges are visited in list order.
    pub fn aggregate(&mut self, x: Var, edges: EdgeList, block: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if block == 0 || rows % block != 0 {
            return Err(Error::shape(format!("aggregate: {rows} rows, block {block}")));
        }
        if edges.iter().any(|&(u, v, _)| u >= block || v >= block) {
            return Err(Error::shape("aggregate: edge outside block"));
        }
        let mut out = self.value(x).clone();
        let src = self.value(x).data();
        let dst = out.data_mut();
        for b in 0..rows / block {
            let base = b * block * cols;
            for &(u, v, w) in edges.iter() {
                let (su, dv) = (base + u * cols, base + v * cols);
                for j in 0..cols {
                    dst[dv + j] += w * src[su + j];
                }
            }
        }
        Ok(self.push(out, Op::Aggregate { x, edges, block }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(rows, cols)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = v.clone();
        for i in 0..v.rows() {
            let lse = log_sum_exp(v.row(i));
            out.row_mut(i).iter_mut().for_each(|y| *y -= lse);
        }
        self.push(out, Op::LogSoftmaxRows { x }, &[x])
    }

    /// Row-wise softmax with the row max subtracted before exponentiating.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = v.clone();
        for i in 0..v.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::SoftmaxRows { x }, &[x])
    }

    /// Column vector of the selected `(row, col)` entries.
    pub fn gather(&mut self, x: Var, index: Vec<(usize, usize)>) -> Result<Var> {
        let v = self.value(x);
        if let Some(&(r, c)) = index.iter().find(|&&(r, c)| r >= v.rows() || c >= v.cols()) {
            return Err(Error::shape(format!("gather index ({r}, {c}) out of range")));
        }
        let out = DenseMatrix::column(index.iter().map(|&ij| v[ij]).collect());
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = DenseMatrix::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scaled(c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    /// Reverse sweep from the scalar `loss`, writing parameter gradients
    /// into `store`. Parameters the loss does not reach get zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        store.begin_backward()?;
        let mut grads: Vec<Option<DenseMatrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => store.accumulate_grad(name, &g)?,
                Op::Affine { x, w, b } => {
                    if self.needs(*x) {
                        let wv = self.value(*w);
                        let mut dx = DenseMatrix::zeros(g.rows(), wv.rows());
                        gemm(1.0, &g, false, wv, true, 0.0, &mut dx);
                        accumulate(&mut grads, *x, 1.0, dx);
                    }
                    if self.needs(*w) {
                        let xv = self.value(*x);
                        let mut dw = DenseMatrix::zeros(xv.cols(), g.cols());
                        gemm(1.0, xv, true, &g, false, 0.0, &mut dw);
                        accumulate(&mut grads, *w, 1.0, dw);
                    }
                    if self.needs(*b) {
                        let mut db = DenseMatrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, &s) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += s;
                            }
                        }
                        accumulate(&mut grads, *b, 1.0, db);
                    }
                }
                Op::Swish { x } => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(v);
                        *d *= s * (1.0 + v * (1.0 - s));
                    }
                    accumulate(&mut grads, *x, 1.0, dx);
                }
                Op::LinComb(terms) => {
                    for &(v, c) in terms {
                        if self.needs(v) {
                            accumulate_slice(&mut grads, self, v, c, g.data());
                        }
                    }
                }
                Op::StackLinComb(blocks) => {
                    let (r, c) = self.shape(blocks[0][0].0);
                    for (bi, block) in blocks.iter().enumerate() {
                        let slab = &g.data()[bi * r * c..(bi + 1) * r * c];
                        for &(v, coef) in block {
                            if self.needs(v) {
                                accumulate_slice(&mut grads, self, v, coef, slab);
                            }
                        }
                    }
                }
                Op::ConcatCols { a, b } => {
                    let ca = self.shape(*a).1;
                    for (v, lo, hi) in [(*a, 0, ca), (*b, ca, g.cols())] {
                        if self.needs(v) {
                            let mut d = DenseMatrix::zeros(g.rows(), hi - lo);
                            for r in 0..g.rows() {
                                d.row_mut(r).copy_from_slice(&g.row(r)[lo..hi]);
                            }
                            accumulate(&mut grads, v, 1.0, d);
                        }
                    }
                }
                Op::Tile { x, reps } => {
                    let (r, c) = self.shape(*x);
                    let mut d = DenseMatrix::zeros(r, c);
                    for k in 0..*reps {
                        let slab = &g.data()[k * r * c..(k + 1) * r * c];
                        for (a, &s) in d.data_mut().iter_mut().zip(slab) {
                            *a += s;
                        }
                    }
                    accumulate(&mut grads, *x, 1.0, d);
                }
                Op::Aggregate { x, edges, block } => {
                    let cols = g.cols();
                    let mut dx = g.clone();
                    let src = g.data();
                    let dst = dx.data_mut();
                    for b in 0..g.rows() / block {
                        let base = b * block * cols;
                        for &(u, v, w) in edges.iter() {
                            let (du, sv) = (base + u * cols, base + v * cols);
                            for j in 0..cols {
                                dst[du + j] += w * src[sv + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, 1.0, dx);
                }
                Op::Reshape { x } => {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut grads, *x, 1.0, g.reshaped(r, c)?);
                }
                Op::LogSoftmaxRows { x } => {
                    let y = &node.value;
                    let mut dx = g;
                    for r in 0..y.rows() {
                        let row = dx.row_mut(r);
                        let total: f64 = row.iter().sum();
                        for (d, &yv) in row.iter_mut().zip(y.row(r)) {
                            *d -= yv.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *x, 1.0, dx);
                }
                Op::SoftmaxRows { x } => {
                    let y = &node.value;
                    let mut dx = g;
                    for r in 0..y.rows() {
                        let row = dx.row_mut(r);
                        let dot: f64 = row.iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (d, &yv) in row.iter_mut().zip(y.row(r)) {
                            *d = yv * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *x, 1.0, dx);
                }
                Op::Gather { x, index } => {
                    let (r, c) = self.shape(*x);
                    let mut dx = DenseMatrix::zeros(r, c);
                    for (&ij, &gv) in index.iter().zip(g.data()) {
                        dx[ij] += gv;
                    }
                    accumulate(&mut grads, *x, 1.0, dx);
                }
                Op::Sum { x } => {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut grads, *x, 1.0, DenseMatrix::filled(r, c, g.data()[0]));
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, *c, g);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], v: Var, c: f64, g: DenseMatrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_scaled(c, &g),
        slot @ None => *slot = Some(if c == 1.0 { g } else { g.scaled(c) }),
    }
}

fn accumulate_slice(grads: &mut [Option<DenseMatrix>], tape: &Tape, v: Var, c: f64, g: &[f64]) {
    let slot = grads[v.0].get_or_insert_with(|| {
        let (r, cols) = tape.shape(v);
        DenseMatrix::zeros(r, cols)
    });
    for (a, &s) in slot.data_mut().iter_mut().zip(g) {
        *a += c * s;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum of exponentials taken in ascending order, so the result does not
/// depend on the order of `shifted`.
fn sorted_exp_sum(shifted: &[f64]) -> f64 {
    let mut e: Vec<f64> = shifted.iter().map(|x| x.exp()).collect();
    e.sort_unstable_by(f64::total_cmp);
    e.iter().sum()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = row.iter().map(|x| x - m).collect();
    m + sorted_exp_sum(&shifted).ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter_mut().for_each(|x| *x -= m);
    let total = sorted_exp_sum(row);
    row.iter_mut().for_each(|x| *x = x.exp() / total);
}
