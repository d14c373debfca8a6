//! Reverse-mode differentiation over a recorded list of matrix operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation stores
//! its output value (and, for elementwise maps, the local derivative), so
//! [`Graph::backward`] only walks the tape once in reverse.

use super::matrix::{gemm, Operand};
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Map(Var, Matrix),
    Map2(Var, Var, Matrix, Matrix),
    SumCols(Var),
    SumAll(Var),
    Broadcast(Var),
    Tile(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Gradient for a parameter (summed over every use in the graph).
    pub fn param(&self, id: ParamId) -> Option<Matrix> {
        let mut acc: Option<Matrix> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(a) = &self.adjoints[node] {
                match &mut acc {
                    Some(m) => m.add_assign(a),
                    None => acc = Some(a.clone()),
                }
            }
        }
        acc
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.params {
            if let Some(a) = &self.adjoints[node] {
                let p = store.get_mut(pid);
                if !p.frozen {
                    p.gradient.add_assign(a);
                }
            }
        }
    }
}

fn assert_same_shape(op: &str, a: &Matrix, b: &Matrix) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: operand shapes {:?} and {:?} differ",
        a.shape(),
        b.shape()
    );
}

impl Graph {
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

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
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

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose adjoint is recorded (useful for sensitivity checks).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = !p.frozen;
        self.push(p.value.clone(), Op::Param(id), rg)
    }

    /// Gradient barrier: same value, no gradient to the inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same_shape("add", va, vb);
        let mut value = va.clone();
        value.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same_shape("sub", va, vb);
        let mut value = va.clone();
        for (x, y) in value.data_mut().iter_mut().zip(vb.data()) {
            *x -= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same_shape("mul", va, vb);
        let mut value = va.clone();
        for (x, y) in value.data_mut().iter_mut().zip(vb.data()) {
            *x *= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + 1·row` where `row` is 1×cols(a).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows(), 1, "add_row: bias must be a single row");
        assert_eq!(vr.cols(), va.cols(), "add_row: column mismatch");
        let mut value = va.clone();
        let r = vr.data();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Elementwise map; `f(index, x)` returns `(value, d value / dx)`.
    pub fn map_indexed(&mut self, a: Var, f: impl Fn(usize, f64) -> (f64, f64)) -> Var {
        let va = self.value(a);
        let (r, c) = va.shape();
        let mut value = Matrix::zeros(r, c);
        let mut deriv = Matrix::zeros(r, c);
        for (k, &x) in va.data().iter().enumerate() {
            let (y, dy) = f(k, x);
            value.data_mut()[k] = y;
            deriv.data_mut()[k] = dy;
        }
        let rg = self.rg(a);
        self.push(value, Op::Map(a, deriv), rg)
    }

    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        self.map_indexed(a, |_, x| f(x))
    }

    /// Elementwise binary map; `f(index, x, y)` returns `(value, ∂/∂x, ∂/∂y)`.
    pub fn map2_indexed(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(usize, f64, f64) -> (f64, f64, f64),
    ) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_same_shape("map2", va, vb);
        let (r, c) = va.shape();
        let mut value = Matrix::zeros(r, c);
        let mut da = Matrix::zeros(r, c);
        let mut db = Matrix::zeros(r, c);
        for k in 0..va.len() {
            let (y, dx, dy) = f(k, va.data()[k], vb.data()[k]);
            value.data_mut()[k] = y;
            da.data_mut()[k] = dx;
            db.data_mut()[k] = dy;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Map2(a, b, da, db), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, |x| (x.ln(), 1.0 / x))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| (x * x, 2.0 * x))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| (x + c, 1.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, |x| (x.abs(), if x < 0.0 { -1.0 } else { 1.0 }))
    }

    /// Elementwise quotient `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.map2_indexed(a, b, |_, x, y| (x / y, 1.0 / y, -x / (y * y)))
    }

    /// Sums each row: r×c → r×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Matrix::from_fn(va.rows(), 1, |i, _| va.row(i).iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a 1×1, 1×c or r×1 node to `rows`×`cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        let (r, c) = va.shape();
        assert!(
            (r == 1 || r == rows) && (c == 1 || c == cols),
            "broadcast: cannot broadcast {r}x{c} to {rows}x{cols}"
        );
        let value = Matrix::from_fn(rows, cols, |i, j| {
            va.get(if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j })
        });
        let rg = self.rg(a);
        self.push(value, Op::Broadcast(a), rg)
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let va = self.value(a);
        let mut data = Vec::with_capacity(va.len() * times);
        for _ in 0..times {
            data.extend_from_slice(va.data());
        }
        let value = Matrix::from_vec(va.rows() * times, va.cols(), data).expect("tile shape");
        let rg = self.rg(a);
        self.push(value, Op::Tile(a, times), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols: row mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + vp.cols()].copy_from_slice(vp.row(i));
            }
            off += vp.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let c = va.cols();
        let value =
            Matrix::from_vec(len, c, va.data()[start * c..(start + len) * c].to_vec()).unwrap();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    /// Propagates adjoints from the 1×1 node `loss` back to every input.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called without a recorded forward pass".into(),
            ));
        }
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(id) = &node.op {
                if adj[idx].is_some() {
                    params.push((*id, idx));
                }
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let vb = self.value(*b);
                        let mut da = Matrix::zeros(g.rows(), vb.rows());
                        gemm(1.0, Operand::normal(&g), Operand::t(vb), 0.0, &mut da);
                        accumulate(&mut adj, *a, da);
                    }
                    if self.rg(*b) {
                        let va = self.value(*a);
                        let mut db = Matrix::zeros(va.cols(), g.cols());
                        gemm(1.0, Operand::t(va), Operand::normal(&g), 0.0, &mut db);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, hadamard(&g, self.value(*b)));
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, hadamard(&g, self.value(*a)));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut dr = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (acc, x) in dr.data_mut().iter_mut().zip(g.row(i)) {
                                *acc += x;
                            }
                        }
                        accumulate(&mut adj, *row, dr);
                    }
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut adj, *a, g.map(|x| x * c));
                }
                Op::Map(a, d) => accumulate(&mut adj, *a, hadamard(&g, d)),
                Op::Map2(a, b, da, db) => {
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, hadamard(&g, da));
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, hadamard(&g, db));
                    }
                }
                Op::SumCols(a) => {
                    let va = self.value(*a);
                    let d = Matrix::from_fn(va.rows(), va.cols(), |i, _| g.get(i, 0));
                    accumulate(&mut adj, *a, d);
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    let d = Matrix::filled(va.rows(), va.cols(), g.get(0, 0));
                    accumulate(&mut adj, *a, d);
                }
                Op::Broadcast(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let (ii, jj) = (if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j });
                            let cur = d.get(ii, jj);
                            d.set(ii, jj, cur + g.get(i, j));
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Tile(a, times) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    for t in 0..*times {
                        let chunk = &g.data()[t * r * c..(t + 1) * r * c];
                        for (acc, x) in d.data_mut().iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        if self.rg(p) {
                            let d = Matrix::from_fn(r, c, |i, j| g.get(i, off + j));
                            accumulate(&mut adj, p, d);
                        }
                        off += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut adj, *a, d);
                }
            }
        }
        Ok(Gradients {
            adjoints: adj,
            params,
        })
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x *= y;
    }
    out
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut adj[v.0] {
        Some(m) => m.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64));
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let l = g.sum(w);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param(id).unwrap(), Matrix::filled(3, 2, 1.0));
    }

    #[test]
    fn backward_on_empty_graph_is_state_error() {
        let g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn backward_on_non_scalar_is_state_error() {
        let mut g = Graph::new();
        let a = g.input(Matrix::zeros(2, 2));
        assert!(matches!(g.backward(a), Err(Error::State(_))));
    }

    #[test]
    fn frozen_parameter_gets_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::filled(2, 2, 0.5));
        store.set_frozen(id, true);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let x = g.input(Matrix::filled(2, 2, 3.0));
        let p = g.mul(w, x);
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert!(grads.param(id).is_none());
        grads.accumulate_into(&mut store);
        assert_eq!(store.gradient(id), &Matrix::zeros(2, 2));
        assert_eq!(grads.wrt(x).unwrap(), &Matrix::filled(2, 2, 0.5));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input(Matrix::filled(1, 3, 2.0));
        let d = g.detach(x);
        let sq = g.square(d);
        let both = g.add(sq, x);
        let l = g.sum(both);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &Matrix::filled(1, 3, 1.0));
    }

    #[test]
    fn parameter_used_twice_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::filled(1, 1, 3.0));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        let p = g.mul(a, b);
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param(id).unwrap().get(0, 0), 6.0);
    }
}
