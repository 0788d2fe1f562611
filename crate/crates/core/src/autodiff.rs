//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only arena of nodes. Each operation records its
//! operands and computes its value eagerly; [`Graph::backward`] then walks the
//! arena from the root towards the leaves. Node indices double as the
//! generation counter, so reverse index order is a valid reverse topological
//! order and every node is visited at most once.
//!
//! Graphs are built fresh for every training step and dropped afterwards.
//!
//! ```
//! use discluster::autodiff::Graph;
//! use discluster::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.square(x);
//! let y = g.sum_all(sq);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
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
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (N×K) + b (1×K)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (N×K) - c (N×1)` broadcast over columns.
    SubCol(Var, Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Square(Var),
    Relu(Var),
    Scale(Var, f64),
    /// N×K → N×1
    SumRows(Var),
    /// N×K → 1×1
    SumAll(Var),
    /// N×K → 1×K
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    /// N×K → N×1, entry `i` taken from column `idx[i]`.
    Pick(Var, Vec<usize>),
    /// (N×m, K×m) → N×K squared Euclidean distances.
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `∂root/∂var`; zeros when `var` does not influence the root.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.adjoints[var.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// The adjoint if gradient reached `var`.
    pub fn try_get(&self, var: Var) -> Option<&Tensor> {
        self.adjoints[var.0].as_ref()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims2()? != b.dims2()? {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no adjoint flows back to `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    /// Adds a `1×K` row to every row of an `N×K` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (r1, k2) = self.value(row).dims2()?;
        if r1 != 1 || k != k2 {
            return Err(Error::dim("add_row", format!("{n}x{k} + {r1}x{k2}")));
        }
        let bias = self.value(row).data();
        let mut out = self.value(a).clone();
        for i in 0..n {
            for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(self.binary(a, row, out, Op::AddRow(a, row)))
    }

    /// Subtracts an `N×1` column from every column of an `N×K` matrix.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (n2, c1) = self.value(col).dims2()?;
        if c1 != 1 || n != n2 {
            return Err(Error::dim("sub_col", format!("{n}x{k} - {n2}x{c1}")));
        }
        let mut out = self.value(a).clone();
        for i in 0..n {
            let c = self.value(col).data()[i];
            for o in out.row_mut(i) {
                *o -= c;
            }
        }
        Ok(self.binary(a, col, out, Op::SubCol(a, col)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        // NaN passes through so callers can report the non-finite loss.
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {x}"),
            });
        }
        let value = self.value(a).map(f64::ln);
        Ok(self.unary(a, value, Op::Log(a)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        self.unary(a, value, Op::Neg(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.unary(a, value, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, _) = self.value(a).dims2()?;
        let data = self.value(a).iter_rows().map(|r| r.iter().sum()).collect();
        let value = Tensor::matrix(n, 1, data)?;
        Ok(self.unary(a, value, Op::SumRows(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.unary(a, value, Op::SumAll(a))
    }

    /// Column-wise mean over rows: `N×K → 1×K`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        if n == 0 {
            return Err(Error::Domain {
                op: "mean_rows",
                detail: "mean over zero rows".into(),
            });
        }
        let mut acc = vec![0.0; k];
        for r in self.value(a).iter_rows() {
            for (s, x) in acc.iter_mut().zip(r) {
                *s += x;
            }
        }
        let inv = 1.0 / n as f64;
        let value = Tensor::row_vector(acc.into_iter().map(|s| s * inv).collect());
        Ok(self.unary(a, value, Op::MeanRows(a)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(p) => self.value(*p).dims2()?.1,
            None => return Err(Error::dim("concat_rows", "no operands")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::dim("concat_rows", format!("{c} columns, expected {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
            rg |= self.requires_grad(p);
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Per-row gather: `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        if idx.len() != n {
            return Err(Error::dim("pick", format!("{} indices for {n} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= k) {
            return Err(Error::Contract(format!("pick: index {bad} out of range for {k} columns")));
        }
        let a_val = self.value(a);
        let data = idx.iter().enumerate().map(|(i, &j)| a_val.get(i, j)).collect();
        let value = Tensor::matrix(n, 1, data)?;
        Ok(self.unary(a, value, Op::Pick(a, idx.to_vec())))
    }

    /// Squared Euclidean distances between the rows of `a` (N×m) and the rows
    /// of `b` (K×m). Computed from differences, so `sq_dist(x, x)` has an
    /// exactly zero diagonal.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        let (k, m2) = self.value(b).dims2()?;
        if m != m2 {
            return Err(Error::dim("sq_dist", format!("{n}x{m} vs {k}x{m2}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            let ra = av.row(i);
            for j in 0..k {
                let rb = bv.row(j);
                data.push(ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let value = Tensor::matrix(n, k, data)?;
        Ok(self.binary(a, b, value, Op::SqDist(a, b)))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.dims2().unwrap_or((1, n.value.len())))
            .collect();
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { adjoints: adj, shapes });
        }
        adj[root.0] = Some(Tensor::new(root_val.shape().to_vec(), vec![1.0])?);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj, shapes })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut adj[v.0] {
            Some(t) => {
                for (a, d) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), delta.into_data())?)
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(adj, *a, g.matmul(&bv.transpose())?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(adj, *b, av.transpose().matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(adj, *a, g.zip_map(bv, |x, y| x * y)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(adj, *b, g.zip_map(av, |x, y| x * y)?)?;
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(adj, *a, g.clone())?;
                if self.requires_grad(*row) {
                    let mut acc = vec![0.0; g.cols()];
                    for r in g.iter_rows() {
                        for (s, x) in acc.iter_mut().zip(r) {
                            *s += x;
                        }
                    }
                    self.accumulate(adj, *row, Tensor::row_vector(acc))?;
                }
            }
            Op::SubCol(a, col) => {
                self.accumulate(adj, *a, g.clone())?;
                if self.requires_grad(*col) {
                    let data = g.iter_rows().map(|r| -r.iter().sum::<f64>()).collect();
                    self.accumulate(adj, *col, Tensor::matrix(g.rows(), 1, data)?)?;
                }
            }
            Op::Exp(a) => {
                self.accumulate(adj, *a, g.zip_map(&node.value, |x, y| x * y)?)?;
            }
            Op::Log(a) => {
                self.accumulate(adj, *a, g.zip_map(self.value(*a), |x, y| x / y)?)?;
            }
            Op::Neg(a) => self.accumulate(adj, *a, g.map(|x| -x))?,
            Op::Square(a) => {
                self.accumulate(adj, *a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)?)?;
            }
            Op::Relu(a) => {
                self.accumulate(
                    adj,
                    *a,
                    g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 })?,
                )?;
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, g.map(|x| c * x))?,
            Op::SumRows(a) => {
                let (n, k) = self.value(*a).dims2()?;
                let mut out = Tensor::zeros(n, k);
                for i in 0..n {
                    let gi = g.data()[i];
                    out.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                self.accumulate(adj, *a, out)?;
            }
            Op::SumAll(a) => {
                let (n, k) = self.value(*a).dims2()?;
                self.accumulate(adj, *a, Tensor::full(n, k, g.data()[0]))?;
            }
            Op::MeanRows(a) => {
                let (n, k) = self.value(*a).dims2()?;
                let inv = 1.0 / n as f64;
                let mut out = Tensor::zeros(n, k);
                for i in 0..n {
                    for (o, x) in out.row_mut(i).iter_mut().zip(g.data()) {
                        *o = x * inv;
                    }
                }
                self.accumulate(adj, *a, out)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let piece = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    let shape = self.value(*p).shape().to_vec();
                    self.accumulate(adj, *p, Tensor::new(shape, piece)?)?;
                }
            }
            Op::Pick(a, idx) => {
                let (n, k) = self.value(*a).dims2()?;
                let mut out = Tensor::zeros(n, k);
                for (i, &j) in idx.iter().enumerate() {
                    out.row_mut(i)[j] = g.data()[i];
                }
                self.accumulate(adj, *a, out)?;
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m) = av.dims2()?;
                let k = bv.rows();
                let mut da = Tensor::zeros(n, m);
                let mut db = Tensor::zeros(k, m);
                for i in 0..n {
                    for j in 0..k {
                        let gij = 2.0 * g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..m {
                            let diff = gij * (av.get(i, c) - bv.get(j, c));
                            da.row_mut(i)[c] += diff;
                            db.row_mut(j)[c] -= diff;
                        }
                    }
                }
                if a == b {
                    // Both operands are the same node; the two contributions add.
                    let sum = da.zip_map(&db, |x, y| x + y)?;
                    self.accumulate(adj, *a, sum)?;
                } else {
                    self.accumulate(adj, *a, da)?;
                    self.accumulate(adj, *b, db)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row_vector(v.to_vec())
    }

    #[test]
    fn matmul_identity_value() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = g.constant(Tensor::identity(2));
        let p = g.matmul(a, i).unwrap();
        assert_eq!(g.value(p), g.value(a));
    }

    #[test]
    fn exp_of_zero() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[0.0, 0.0]));
        let e = g.exp(x);
        assert_eq!(g.value(e).data(), &[1.0, 1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, -2.0]));
        let d = g.detach(x);
        assert_eq!(g.value(d), g.value(x));
        let sq = g.square(d);
        let both = g.add(sq, x).unwrap();
        let y = g.sum_all(both);
        let grads = g.backward(y).unwrap();
        // Only the direct path contributes.
        assert_eq!(grads.get(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, 2.0, 3.0]));
        let sq = g.square(x);
        let y = g.sum_all(sq);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_has_zero_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, 2.0]));
        let c = g.constant(Tensor::scalar(3.0));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn log_domain_error_names_op() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, 0.0]));
        match g.log(x) {
            Err(Error::Domain { op, .. }) => assert_eq!(op, "log"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.leaf(row(&[1.0, 2.0]));
        let b = g.leaf(row(&[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(g.matmul(a, a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn reused_node_accumulates() {
        // y = sum(x * x) through Mul with both operands equal.
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.5, -2.0]));
        let p = g.mul(x, x).unwrap();
        let y = g.sum_all(p);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).data(), &[3.0, -4.0]);
    }

    #[test]
    fn sq_dist_self_has_zero_diagonal() {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap());
        let d = g.sq_dist(m, m).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 25.0, 25.0, 0.0]);
    }
}
