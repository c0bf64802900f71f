//! Reverse-mode automatic differentiation over dense `f64` tensors, plus
//! the small neural toolkit built on it: GRU cells, Adam, orthogonal
//! initialization, dropout, and a JSON checkpoint container.
//!
//! The engine is a Wengert tape of eagerly evaluated nodes: building the
//! graph computes values immediately, and [`Tape::backward`] replays the
//! tape in reverse, accumulating adjoints. Tensors are dynamic-rank `f64`
//! arrays; scalars are one-element vectors. Softmax variants treat `-inf`
//! logits as hard zeros, which is how candidate masking reaches the
//! probability domain exactly.
//!
//! Everything here favours determinism and checkability over speed — the
//! models in this crate are desk-scale by design, and every operation's
//! gradient is pinned against central finite differences in the tests.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Tape and variables
// ---------------------------------------------------------------------------

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `k*x + c` elementwise; only the scale matters to the backward pass.
    Affine(usize, f64),
    /// Matrix + row-vector broadcast over rows.
    AddBias(usize, usize),
    /// `out[r, c] = mat[r, c] * vec[r]` — per-row scaling.
    MulCol(usize, usize),
    MatMul(usize, usize),
    MatVec(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    /// Total sum to a one-element scalar.
    Sum(usize),
    /// Per-row sum of a matrix to a vector.
    RowSum(usize),
    Dot(usize, usize),
    /// 1-D concatenation.
    Concat(Vec<usize>),
    /// Column-wise concatenation of equal-row matrices.
    ConcatCols(Vec<usize>),
    /// Equal-length vectors stacked as matrix rows.
    StackRows(Vec<usize>),
    /// Equal-length vectors stacked as matrix columns.
    StackCols(Vec<usize>),
    Row(usize, usize),
    Col(usize, usize),
    /// Scalar pick from a vector.
    Index(usize, usize),
    /// Row gather with repeats allowed: `out[i, :] = mat[ids[i], :]`.
    GatherRows(usize, Vec<usize>),
    /// Per-row column pick: `out[r] = mat[r, ids[r]]`.
    SelectCols(usize, Vec<usize>),
    /// Stable softmax of a vector; `-inf` entries become exact zeros.
    Softmax(usize),
    /// Row-wise stable softmax of a matrix.
    RowSoftmax(usize),
    /// Row-wise log-softmax of a matrix.
    RowLogSoftmax(usize),
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
}

/// Recording context for one forward/backward pass. Cheap to create; build
/// a fresh tape per training step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node. Copyable; all arithmetic methods record new nodes
/// on the owning tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

fn m2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("matrix operand expected")
}

fn m1(a: &ArrayD<f64>) -> ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("vector operand expected")
}

fn stable_softmax(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        max > f64::NEG_INFINITY,
        "softmax over a fully masked logit vector"
    );
    let mut out = row.mapv(|v| (v - max).exp());
    let z: f64 = out.sum();
    out.mapv_inplace(|v| v / z);
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, op: Op, value: ArrayD<f64>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records an input tensor. Parameters and constants are both leaves;
    /// only the leaves a [`BoundParams`] tracks have their gradients read.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(ndarray::arr1(&[v]).into_dyn())
    }

    pub fn vector(&self, vs: &[f64]) -> Var<'_> {
        self.leaf(Array1::from(vs.to_vec()).into_dyn())
    }

    /// 1-D concatenation of vectors.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let nodes = self.nodes.borrow();
        let mut data = Vec::new();
        for p in parts {
            data.extend(m1(&nodes[p.id].value).iter().cloned());
        }
        drop(nodes);
        self.push(
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            Array1::from(data).into_dyn(),
        )
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let nodes = self.nodes.borrow();
        let rows = m2(&nodes[parts[0].id].value).nrows();
        let total: usize = parts.iter().map(|p| m2(&nodes[p.id].value).ncols()).collect::<Vec<_>>().iter().sum();
        let mut out = Array2::<f64>::zeros((rows, total));
        let mut at = 0;
        for p in parts {
            let v = m2(&nodes[p.id].value);
            assert_eq!(v.nrows(), rows, "concat_cols: row counts differ");
            out.slice_mut(ndarray::s![.., at..at + v.ncols()]).assign(&v);
            at += v.ncols();
        }
        drop(nodes);
        self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), out.into_dyn())
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let nodes = self.nodes.borrow();
        let cols = m1(&nodes[parts[0].id].value).len();
        let mut out = Array2::<f64>::zeros((parts.len(), cols));
        for (i, p) in parts.iter().enumerate() {
            out.row_mut(i).assign(&m1(&nodes[p.id].value));
        }
        drop(nodes);
        self.push(Op::StackRows(parts.iter().map(|p| p.id).collect()), out.into_dyn())
    }

    /// Stacks equal-length vectors as the columns of a matrix.
    pub fn stack_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let nodes = self.nodes.borrow();
        let rows = m1(&nodes[parts[0].id].value).len();
        let mut out = Array2::<f64>::zeros((rows, parts.len()));
        for (i, p) in parts.iter().enumerate() {
            out.column_mut(i).assign(&m1(&nodes[p.id].value));
        }
        drop(nodes);
        self.push(Op::StackCols(parts.iter().map(|p| p.id).collect()), out.into_dyn())
    }

    /// Leafs every tensor of `params` onto this tape, preserving order, so
    /// a later [`Tape::backward`] can be read back as one flat gradient.
    pub fn bind(&self, params: &Params) -> BoundParams<'_> {
        let mut vars = Vec::with_capacity(params.entries.len());
        let mut index = BTreeMap::new();
        for (name, tensor) in &params.entries {
            index.insert(name.clone(), vars.len());
            vars.push((name.clone(), self.leaf(tensor.clone())));
        }
        BoundParams { vars, index }
    }

    /// Reverse pass from a scalar root. Returns per-node adjoints.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(ArrayD::ones(nodes[root.id].value.raw_dim()));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * &nodes[*b].value);
                    acc(&mut grads, *b, &g * &nodes[*a].value);
                }
                Op::Div(a, b) => {
                    let bv = &nodes[*b].value;
                    acc(&mut grads, *a, &g / bv);
                    acc(&mut grads, *b, -(&g * &nodes[*a].value) / (bv * bv));
                }
                Op::Affine(a, k) => {
                    acc(&mut grads, *a, g.mapv(|v| v * k));
                }
                Op::AddBias(mat, bias) => {
                    let colsum = m2(&g).sum_axis(Axis(0));
                    acc(&mut grads, *mat, g);
                    acc(&mut grads, *bias, colsum.into_dyn());
                }
                Op::MulCol(mat, vec) => {
                    let g2 = m2(&g);
                    let matv = m2(&nodes[*mat].value);
                    let vecv = m1(&nodes[*vec].value);
                    let mut dm = g2.to_owned();
                    for (mut row, s) in dm.rows_mut().into_iter().zip(vecv.iter()) {
                        row.mapv_inplace(|v| v * s);
                    }
                    let dv: Array1<f64> = g2
                        .rows()
                        .into_iter()
                        .zip(matv.rows())
                        .map(|(gr, mr)| gr.dot(&mr))
                        .collect();
                    acc(&mut grads, *mat, dm.into_dyn());
                    acc(&mut grads, *vec, dv.into_dyn());
                }
                Op::MatMul(a, b) => {
                    let g2 = m2(&g);
                    let av = m2(&nodes[*a].value);
                    let bv = m2(&nodes[*b].value);
                    acc(&mut grads, *a, g2.dot(&bv.t()).into_dyn());
                    acc(&mut grads, *b, av.t().dot(&g2).into_dyn());
                }
                Op::MatVec(mat, vec) => {
                    let g1 = m1(&g);
                    let matv = m2(&nodes[*mat].value);
                    let vecv = m1(&nodes[*vec].value);
                    let gc = g1.insert_axis(Axis(1));
                    let vr = vecv.insert_axis(Axis(0));
                    acc(&mut grads, *mat, gc.dot(&vr).into_dyn());
                    acc(&mut grads, *vec, matv.t().dot(&g1).into_dyn());
                }
                Op::Transpose(a) => {
                    acc(&mut grads, *a, m2(&g).t().to_owned().into_dyn());
                }
                Op::Tanh(a) => {
                    let y = &nodes[id].value;
                    acc(&mut grads, *a, &g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[id].value;
                    acc(&mut grads, *a, &g * &y.mapv(|v| v * (1.0 - v)));
                }
                Op::Exp(a) => {
                    acc(&mut grads, *a, &g * &nodes[id].value);
                }
                Op::Ln(a) => {
                    acc(&mut grads, *a, &g / &nodes[*a].value);
                }
                Op::Sqrt(a) => {
                    let y = &nodes[id].value;
                    acc(&mut grads, *a, &g / &y.mapv(|v| 2.0 * v));
                }
                Op::Sum(a) => {
                    let s = g[[0]];
                    acc(&mut grads, *a, ArrayD::from_elem(nodes[*a].value.raw_dim(), s));
                }
                Op::RowSum(a) => {
                    let g1 = m1(&g);
                    let av = m2(&nodes[*a].value);
                    let mut da = Array2::<f64>::zeros((av.nrows(), av.ncols()));
                    for (mut row, s) in da.rows_mut().into_iter().zip(g1.iter()) {
                        row.fill(*s);
                    }
                    acc(&mut grads, *a, da.into_dyn());
                }
                Op::Dot(a, b) => {
                    let s = g[[0]];
                    acc(&mut grads, *a, nodes[*b].value.mapv(|v| v * s));
                    acc(&mut grads, *b, nodes[*a].value.mapv(|v| v * s));
                }
                Op::Concat(parts) => {
                    let g1 = m1(&g);
                    let mut at = 0;
                    for p in parts {
                        let n = nodes[*p].value.len();
                        acc(
                            &mut grads,
                            *p,
                            g1.slice(ndarray::s![at..at + n]).to_owned().into_dyn(),
                        );
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let g2 = m2(&g);
                    let mut at = 0;
                    for p in parts {
                        let n = m2(&nodes[*p].value).ncols();
                        acc(
                            &mut grads,
                            *p,
                            g2.slice(ndarray::s![.., at..at + n]).to_owned().into_dyn(),
                        );
                        at += n;
                    }
                }
                Op::StackRows(parts) => {
                    let g2 = m2(&g);
                    for (i, p) in parts.iter().enumerate() {
                        acc(&mut grads, *p, g2.row(i).to_owned().into_dyn());
                    }
                }
                Op::StackCols(parts) => {
                    let g2 = m2(&g);
                    for (i, p) in parts.iter().enumerate() {
                        acc(&mut grads, *p, g2.column(i).to_owned().into_dyn());
                    }
                }
                Op::Row(a, i) => {
                    let av = m2(&nodes[*a].value);
                    let mut da = Array2::<f64>::zeros((av.nrows(), av.ncols()));
                    da.row_mut(*i).assign(&m1(&g));
                    acc(&mut grads, *a, da.into_dyn());
                }
                Op::Col(a, i) => {
                    let av = m2(&nodes[*a].value);
                    let mut da = Array2::<f64>::zeros((av.nrows(), av.ncols()));
                    da.column_mut(*i).assign(&m1(&g));
                    acc(&mut grads, *a, da.into_dyn());
                }
                Op::Index(a, i) => {
                    let mut da = Array1::<f64>::zeros(nodes[*a].value.len());
                    da[*i] = g[[0]];
                    acc(&mut grads, *a, da.into_dyn());
                }
                Op::GatherRows(a, ids) => {
                    let g2 = m2(&g);
                    let av = m2(&nodes[*a].value);
                    let mut da = Array2::<f64>::zeros((av.nrows(), av.ncols()));
                    for (gi, src) in ids.iter().enumerate() {
                        let mut row = da.row_mut(*src);
                        row += &g2.row(gi);
                    }
                    acc(&mut grads, *a, da.into_dyn());
                }
                Op::SelectCols(a, ids) => {
                    let g1 = m1(&g);
                    let av = m2(&nodes[*a].value);
                    let mut da = Array2::<f64>::zeros((av.nrows(), av.ncols()));
                    for (r, c) in ids.iter().enumerate() {
                        da[[r, *c]] = g1[r];
                    }
                    acc(&mut grads, *a, da.into_dyn());
                }
                Op::Softmax(a) => {
                    let y = m1(&nodes[id].value);
                    let g1 = m1(&g);
                    let inner: f64 = g1.dot(&y);
                    let da: Array1<f64> =
                        y.iter().zip(g1.iter()).map(|(yi, gi)| yi * (gi - inner)).collect();
                    acc(&mut grads, *a, da.into_dyn());
                }
                Op::RowSoftmax(a) => {
                    let y = m2(&nodes[id].value);
                    let g2 = m2(&g);
                    let mut da = Array2::<f64>::zeros((y.nrows(), y.ncols()));
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g2.row(r);
                        let inner = gr.dot(&yr);
                        for c in 0..y.ncols() {
                            da[[r, c]] = yr[c] * (gr[c] - inner);
                        }
                    }
                    acc(&mut grads, *a, da.into_dyn());
                }
                Op::RowLogSoftmax(a) => {
                    let lp = m2(&nodes[id].value);
                    let g2 = m2(&g);
                    let mut da = Array2::<f64>::zeros((lp.nrows(), lp.ncols()));
                    for r in 0..lp.nrows() {
                        let gsum: f64 = g2.row(r).sum();
                        for c in 0..lp.ncols() {
                            let y = lp[[r, c]].exp();
                            da[[r, c]] = g2[[r, c]] - y * gsum;
                        }
                    }
                    acc(&mut grads, *a, da.into_dyn());
                }
            }
        }
        Gradients { grads }
    }
}

fn acc(grads: &mut [Option<ArrayD<f64>>], id: usize, contribution: ArrayD<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &contribution,
        slot => *slot = Some(contribution),
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when the root does
    /// not depend on `v`.
    pub fn get(&self, v: Var<'_>) -> Option<&ArrayD<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl<'t> Var<'t> {
    fn node_value(&self) -> ArrayD<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Snapshot of this node's value.
    pub fn value(&self) -> ArrayD<f64> {
        self.node_value()
    }

    /// Value of a one-element node.
    pub fn scalar_value(&self) -> f64 {
        let v = self.node_value();
        assert_eq!(v.len(), 1, "scalar_value on non-scalar");
        *v.iter().next().unwrap()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_shape_binary(self, other: Var<'t>, op: fn(usize, usize) -> Op, f: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        assert_eq!(a.shape(), b.shape(), "elementwise operands must match");
        let value = f(a, b);
        drop(nodes);
        self.tape.push(op(self.id, other.id), value)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_shape_binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_shape_binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_shape_binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.same_shape_binary(other, Op::Div, |a, b| a / b)
    }

    /// Elementwise `k*x + c`.
    pub fn affine(self, k: f64, c: f64) -> Var<'t> {
        let value = self.node_value().mapv(|v| k * v + c);
        self.tape.push(Op::Affine(self.id, k), value)
    }

    /// Matrix plus a row vector broadcast over every row.
    pub fn add_bias(self, bias: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let mat = m2(&nodes[self.id].value);
        let b = m1(&nodes[bias.id].value);
        assert_eq!(mat.ncols(), b.len(), "bias width must match columns");
        let value = (&mat + &b.insert_axis(Axis(0))).into_dyn();
        drop(nodes);
        self.tape.push(Op::AddBias(self.id, bias.id), value)
    }

    /// Scales row `r` of the matrix by `vec[r]`.
    pub fn mul_col(self, vec: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let mat = m2(&nodes[self.id].value);
        let v = m1(&nodes[vec.id].value);
        assert_eq!(mat.nrows(), v.len(), "per-row scale length must match rows");
        let mut out = mat.to_owned();
        for (mut row, s) in out.rows_mut().into_iter().zip(v.iter()) {
            row.mapv_inplace(|x| x * s);
        }
        drop(nodes);
        self.tape.push(Op::MulCol(self.id, vec.id), out.into_dyn())
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = m2(&nodes[self.id].value);
        let b = m2(&nodes[other.id].value);
        let value = a.dot(&b).into_dyn();
        drop(nodes);
        self.tape.push(Op::MatMul(self.id, other.id), value)
    }

    pub fn matvec(self, vec: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = m2(&nodes[self.id].value);
        let v = m1(&nodes[vec.id].value);
        let value = a.dot(&v).into_dyn();
        drop(nodes);
        self.tape.push(Op::MatVec(self.id, vec.id), value)
    }

    pub fn t(self) -> Var<'t> {
        let value = m2(&self.node_value()).t().to_owned().into_dyn();
        self.tape.push(Op::Transpose(self.id), value)
    }

    pub fn tanh(self) -> Var<'t> {
        let value = self.node_value().mapv(f64::tanh);
        self.tape.push(Op::Tanh(self.id), value)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.node_value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.tape.push(Op::Sigmoid(self.id), value)
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.node_value().mapv(f64::exp);
        self.tape.push(Op::Exp(self.id), value)
    }

    pub fn ln(self) -> Var<'t> {
        let value = self.node_value().mapv(f64::ln);
        self.tape.push(Op::Ln(self.id), value)
    }

    pub fn sqrt(self) -> Var<'t> {
        let value = self.node_value().mapv(f64::sqrt);
        self.tape.push(Op::Sqrt(self.id), value)
    }

    /// Sum of all entries, as a one-element scalar.
    pub fn sum(self) -> Var<'t> {
        let value = ndarray::arr1(&[self.node_value().sum()]).into_dyn();
        self.tape.push(Op::Sum(self.id), value)
    }

    /// Per-row sums of a matrix.
    pub fn row_sum(self) -> Var<'t> {
        let value = m2(&self.node_value()).sum_axis(Axis(1)).into_dyn();
        self.tape.push(Op::RowSum(self.id), value)
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let a = m1(&nodes[self.id].value);
        let b = m1(&nodes[other.id].value);
        let value = ndarray::arr1(&[a.dot(&b)]).into_dyn();
        drop(nodes);
        self.tape.push(Op::Dot(self.id, other.id), value)
    }

    pub fn row(self, i: usize) -> Var<'t> {
        let value = m2(&self.node_value()).row(i).to_owned().into_dyn();
        self.tape.push(Op::Row(self.id, i), value)
    }

    pub fn col(self, i: usize) -> Var<'t> {
        let value = m2(&self.node_value()).column(i).to_owned().into_dyn();
        self.tape.push(Op::Col(self.id, i), value)
    }

    /// Scalar pick `vec[i]`.
    pub fn at(self, i: usize) -> Var<'t> {
        let v = self.node_value();
        let value = ndarray::arr1(&[m1(&v)[i]]).into_dyn();
        self.tape.push(Op::Index(self.id, i), value)
    }

    /// Row gather; indices may repeat (their gradients accumulate).
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t> {
        let v = self.node_value();
        let mat = m2(&v);
        let mut out = Array2::<f64>::zeros((ids.len(), mat.ncols()));
        for (i, id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&mat.row(*id));
        }
        self.tape.push(Op::GatherRows(self.id, ids.to_vec()), out.into_dyn())
    }

    /// Per-row column pick: `out[r] = mat[r, ids[r]]`.
    pub fn select_cols(self, ids: &[usize]) -> Var<'t> {
        let v = self.node_value();
        let mat = m2(&v);
        assert_eq!(ids.len(), mat.nrows(), "one column index per row");
        let out: Array1<f64> =
            ids.iter().enumerate().map(|(r, c)| mat[[r, *c]]).collect();
        self.tape.push(Op::SelectCols(self.id, ids.to_vec()), out.into_dyn())
    }

    /// Stable softmax; `-inf` logits yield exactly-zero probabilities.
    pub fn softmax(self) -> Var<'t> {
        let v = self.node_value();
        let value = stable_softmax(m1(&v)).into_dyn();
        self.tape.push(Op::Softmax(self.id), value)
    }

    pub fn row_softmax(self) -> Var<'t> {
        let v = self.node_value();
        let mat = m2(&v);
        let mut out = Array2::<f64>::zeros((mat.nrows(), mat.ncols()));
        for (mut o, row) in out.rows_mut().into_iter().zip(mat.rows()) {
            o.assign(&stable_softmax(row));
        }
        self.tape.push(Op::RowSoftmax(self.id), out.into_dyn())
    }

    pub fn row_log_softmax(self) -> Var<'t> {
        let v = self.node_value();
        let mat = m2(&v);
        let mut out = Array2::<f64>::zeros((mat.nrows(), mat.ncols()));
        for (mut o, row) in out.rows_mut().into_iter().zip(mat.rows()) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max > f64::NEG_INFINITY, "log-softmax over fully masked row");
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            o.assign(&row.mapv(|v| v - lse));
        }
        self.tape.push(Op::RowLogSoftmax(self.id), out.into_dyn())
    }
}

/// Cosine similarity of two vectors as a scalar node, with a small floor
/// inside each norm so zero vectors score 0 instead of dividing by zero.
pub fn cosine<'t>(u: Var<'t>, v: Var<'t>) -> Var<'t> {
    let tape = u.tape;
    let eps = tape.scalar(1e-12);
    let nu = u.dot(u).add(eps).sqrt();
    let nv = v.dot(v).add(eps).sqrt();
    u.dot(v).div(nu.mul(nv))
}

// ---------------------------------------------------------------------------
// Named parameter sets
// ---------------------------------------------------------------------------

/// Ordered, name-addressable collection of parameter tensors. The flat
/// serialization order is insertion order, which makes gradient vectors,
/// Adam state, and finite-difference probes line up.
#[derive(Clone, Debug, Default)]
pub struct Params {
    entries: Vec<(String, ArrayD<f64>)>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name:?}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name:?}"));
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All tensors flattened in insertion order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (_, t) in &self.entries {
            out.extend(t.iter().cloned());
        }
        out
    }

    /// Writes a flat vector (as produced by [`Params::to_flat`]) back into
    /// the tensors.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.flat_len(), "flat vector length mismatch");
        let mut at = 0;
        for (_, t) in &mut self.entries {
            for v in t.iter_mut() {
                *v = flat[at];
                at += 1;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn to_saved(&self) -> Vec<SavedTensor> {
        self.entries
            .iter()
            .map(|(name, t)| SavedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.iter().cloned().collect(),
            })
            .collect()
    }

    pub fn from_saved(saved: &[SavedTensor]) -> Result<Self> {
        let mut params = Params::new();
        for t in saved {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(Error::Validation(format!(
                    "tensor {:?}: shape {:?} holds {n} values but {} were provided",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&t.shape), t.data.clone())
                .map_err(|e| Error::Validation(format!("tensor {:?}: {e}", t.name)))?;
            params.insert(&t.name, arr);
        }
        Ok(params)
    }
}

/// Tape-bound view of a [`Params`]: one leaf variable per tensor.
pub struct BoundParams<'t> {
    vars: Vec<(String, Var<'t>)>,
    index: BTreeMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name:?}"));
        self.vars[i].1
    }

    /// Gradient of the backward root with respect to every bound tensor,
    /// flattened in binding order; zero where the root was independent.
    pub fn flat_grads(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, var) in &self.vars {
            match grads.get(*var) {
                Some(g) => out.extend(g.iter().cloned()),
                None => out.extend(std::iter::repeat_n(0.0, var.shape().iter().product::<usize>())),
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Optimizer and initializers
// ---------------------------------------------------------------------------

/// Adaptive-moment estimation with bias correction. `step` descends; pass
/// negated gradients to ascend.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; dim], v: vec![0.0; dim] }
    }

    pub fn step(&mut self, params: &mut Params, grad: &[f64]) {
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let mut flat = params.to_flat();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..flat.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            flat[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        params.set_flat(&flat);
    }
}

/// Uniform values in `[-scale, scale]`.
pub fn uniform_init(shape: &[usize], scale: f64, rng: &mut impl Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

/// Semi-orthogonal `rows x cols` matrix by Gram-Schmidt over uniform draws:
/// the shorter dimension's vectors come out orthonormal.
pub fn orthogonal_init(rows: usize, cols: usize, rng: &mut impl Rng) -> ArrayD<f64> {
    let long = rows.max(cols);
    let short = rows.min(cols);
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Array1<f64> =
            (0..long).map(|_| rng.random_range(-1.0..=1.0)).collect();
        for b in &basis {
            let p = v.dot(b);
            v = &v - &b.mapv(|x| x * p);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.push(v.mapv(|x| x / norm));
        }
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    if rows >= cols {
        for (c, b) in basis.iter().enumerate() {
            out.column_mut(c).assign(b);
        }
    } else {
        for (r, b) in basis.iter().enumerate() {
            out.row_mut(r).assign(b);
        }
    }
    out.into_dyn()
}

/// Inverted dropout: in training mode zeroes entries with probability
/// `rate` and scales survivors by `1/(1-rate)`; identity otherwise.
pub fn dropout<'t>(x: Var<'t>, rate: f64, training: bool, rng: &mut impl Rng) -> Var<'t> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if !training || rate == 0.0 {
        return x;
    }
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let keep = 1.0 - rate;
    let data: Vec<f64> =
        (0..n).map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 }).collect();
    let mask = x.tape.leaf(ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data).unwrap());
    x.mul(mask)
}

// ---------------------------------------------------------------------------
// GRU cells
// ---------------------------------------------------------------------------

/// Registers the nine tensors of one GRU cell under `prefix`: input and
/// recurrent weights orthogonal-initialized, biases zero.
pub fn init_gru(params: &mut Params, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) {
    for gate in ["z", "r", "n"] {
        params.insert(&format!("{prefix}.w{gate}"), orthogonal_init(input, hidden, rng));
        params.insert(&format!("{prefix}.u{gate}"), orthogonal_init(hidden, hidden, rng));
        params.insert(&format!("{prefix}.b{gate}"), ArrayD::zeros(ndarray::IxDyn(&[hidden])));
    }
}

/// One GRU step over a batch: `x` is `B x input`, `h` is `B x hidden`;
/// returns the next `B x hidden` state.
///
/// Update gate `z` and reset gate `r` are sigmoid; the candidate state uses
/// the reset-before-recurrence form `tanh(xW + (r.h)U + b)`.
pub fn gru_step<'t>(bound: &BoundParams<'t>, prefix: &str, x: Var<'t>, h: Var<'t>) -> Var<'t> {
    let w = |g: &str| bound.var(&format!("{prefix}.w{g}"));
    let u = |g: &str| bound.var(&format!("{prefix}.u{g}"));
    let b = |g: &str| bound.var(&format!("{prefix}.b{g}"));
    let z = x.matmul(w("z")).add(h.matmul(u("z"))).add_bias(b("z")).sigmoid();
    let r = x.matmul(w("r")).add(h.matmul(u("r"))).add_bias(b("r")).sigmoid();
    let n = x.matmul(w("n")).add(r.mul(h).matmul(u("n"))).add_bias(b("n")).tanh();
    // h' = (1 - z).n + z.h
    z.affine(-1.0, 1.0).mul(n).add(z.mul(h))
}

/// [`gru_step`] with a per-example keep mask (1 = advance, 0 = hold the
/// previous state), for batches of unequal-length sequences.
pub fn gru_step_masked<'t>(
    bound: &BoundParams<'t>,
    prefix: &str,
    x: Var<'t>,
    h: Var<'t>,
    mask: Var<'t>,
) -> Var<'t> {
    let next = gru_step(bound, prefix, x, h);
    next.mul_col(mask).add(h.mul_col(mask.affine(-1.0, 1.0)))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned parameter container shared by every trainable model in the
/// crate. `inventory_digest` ties policy checkpoints to the exact span
/// inventory they index into.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inventory_digest: Option<String>,
    /// Model-specific extras (architecture dims, vocabularies, …).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
    pub tensors: Vec<SavedTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, params: &Params) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            seed,
            inventory_digest: None,
            meta: serde_json::Value::Null,
            tensors: params.to_saved(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self)
            .map_err(|e| Error::Validation(format!("writing checkpoint: {e}")))?;
        use std::io::Write as _;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::parse(path, 0, format!("invalid checkpoint: {e}")))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn params(&self) -> Result<Params> {
        Params::from_saved(&self.tensors)
    }
}
