//! Reverse-mode differentiation over a flat tape of vector nodes.
//!
//! The op set is exactly what the toy model needs: dense matrix-vector
//! products, elementwise nonlinearities, concatenation and pooling for
//! context features, and the scalar reductions of the training losses
//! (log-sum-exp for cross-entropy, softplus for the squashed heads, a
//! squared-error reduction for velocities). Nodes are appended in forward
//! order, so a single reverse sweep propagates adjoints; gradients are
//! checked for NaN/Inf as they are produced.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("non-finite gradient first produced at node {node} ({op})")]
    NonFiniteGradient { node: usize, op: &'static str },
    #[error("non-finite value in forward pass at node {node} ({op})")]
    NonFiniteValue { node: usize, op: &'static str },
    #[error("backward root must be a scalar node")]
    NonScalarRoot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Concat(Vec<NodeId>),
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    GatherRow { table: NodeId, row: usize, dim: usize },
    Add(NodeId, NodeId),
    AddConst(NodeId, f64),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Softplus(NodeId),
    Ln(NodeId),
    MeanMany(Vec<NodeId>),
    LogSumExp(NodeId),
    DotConst(NodeId, Vec<f64>),
    MseConst(NodeId, Vec<f64>),
    WeightedSum(Vec<(NodeId, f64)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Concat(_) => "concat",
            Op::MatVec { .. } => "matvec",
            Op::GatherRow { .. } => "gather_row",
            Op::Add(..) => "add",
            Op::AddConst(..) => "add_const",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Ln(_) => "ln",
            Op::MeanMany(_) => "mean_many",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::DotConst(..) => "dot_const",
            Op::MseConst(..) => "mse_const",
            Op::WeightedSum(_) => "weighted_sum",
        }
    }
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Append-only computation graph; indices double as topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn stable_softplus(x: f64) -> f64 {
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, values: Vec<f64>) -> NodeId {
        self.push(values, Op::Leaf)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        self.push(value, Op::Concat(parts.to_vec()))
    }

    /// `w` is a `rows x cols` matrix stored row-major as one flat node.
    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.value(w).len(), rows * cols, "matrix shape");
        assert_eq!(self.value(x).len(), cols, "vector shape");
        let mut value = vec![0.0; rows];
        {
            let wv = self.value(w);
            let xv = self.value(x);
            for r in 0..rows {
                let mut acc = 0.0;
                let row = &wv[r * cols..(r + 1) * cols];
                for (a, b) in row.iter().zip(xv) {
                    acc += a * b;
                }
                value[r] = acc;
            }
        }
        self.push(value, Op::MatVec { w, x, rows, cols })
    }

    /// Extract row `row` of a flat row-major table node.
    pub fn gather_row(&mut self, table: NodeId, row: usize, dim: usize) -> NodeId {
        assert!((row + 1) * dim <= self.value(table).len(), "row out of table");
        let value = self.value(table)[row * dim..(row + 1) * dim].to_vec();
        self.push(value, Op::GatherRow { table, row, dim })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).len(), self.value(b).len());
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(value, Op::Add(a, b))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).iter().map(|x| x + c).collect();
        self.push(value, Op::AddConst(a, c))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).iter().map(|x| x * c).collect();
        self.push(value, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(value, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|&x| stable_softplus(x)).collect();
        self.push(value, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(value, Op::Ln(a))
    }

    /// Elementwise mean of equal-length vectors.
    pub fn mean_many(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "mean over nothing");
        let dim = self.value(parts[0]).len();
        let mut value = vec![0.0; dim];
        for &p in parts {
            for (acc, x) in value.iter_mut().zip(self.value(p)) {
                *acc += x;
            }
        }
        for acc in &mut value {
            *acc /= parts.len() as f64;
        }
        self.push(value, Op::MeanMany(parts.to_vec()))
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let xs = self.value(a);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let value = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        self.push(vec![value], Op::LogSumExp(a))
    }

    pub fn dot_const(&mut self, a: NodeId, weights: Vec<f64>) -> NodeId {
        assert_eq!(self.value(a).len(), weights.len());
        let value = self
            .value(a)
            .iter()
            .zip(&weights)
            .map(|(x, w)| x * w)
            .sum();
        self.push(vec![value], Op::DotConst(a, weights))
    }

    /// Dimension-averaged squared error against a constant target.
    pub fn mse_const(&mut self, a: NodeId, target: Vec<f64>) -> NodeId {
        assert_eq!(self.value(a).len(), target.len());
        let dim = target.len().max(1) as f64;
        let value = self
            .value(a)
            .iter()
            .zip(&target)
            .map(|(x, t)| (x - t).powi(2))
            .sum::<f64>()
            / dim;
        self.push(vec![value], Op::MseConst(a, target))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let value = terms
            .iter()
            .map(|&(id, w)| {
                debug_assert_eq!(self.value(id).len(), 1);
                self.value(id)[0] * w
            })
            .sum();
        self.push(vec![value], Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse sweep from a scalar root. Returns one adjoint buffer per node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TapeError> {
        if self.value(root).len() != 1 {
            return Err(TapeError::NonScalarRoot);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.value.iter().any(|v| !v.is_finite()) {
                return Err(TapeError::NonFiniteValue {
                    node: i,
                    op: node.op.name(),
                });
            }
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[root.0][0] = 1.0;
        for i in (0..=root.0).rev() {
            let g = std::mem::take(&mut grads[i]);
            if g.iter().all(|&x| x == 0.0) {
                grads[i] = g;
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TapeError::NonFiniteGradient {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        for d in 0..len {
                            grads[p.0][d] += g[offset + d];
                        }
                        offset += len;
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    for r in 0..*rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..*cols {
                            grads[w.0][r * cols + c] += gr * xv[c];
                            grads[x.0][c] += gr * wv[r * cols + c];
                        }
                    }
                }
                Op::GatherRow { table, row, dim } => {
                    for d in 0..*dim {
                        grads[table.0][row * dim + d] += g[d];
                    }
                }
                Op::Add(a, b) => {
                    for (d, &gd) in g.iter().enumerate() {
                        grads[a.0][d] += gd;
                    }
                    for (d, &gd) in g.iter().enumerate() {
                        grads[b.0][d] += gd;
                    }
                }
                Op::AddConst(a, _) => {
                    for (d, &gd) in g.iter().enumerate() {
                        grads[a.0][d] += gd;
                    }
                }
                Op::Scale(a, c) => {
                    for (d, &gd) in g.iter().enumerate() {
                        grads[a.0][d] += c * gd;
                    }
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    for (d, &gd) in g.iter().enumerate() {
                        grads[a.0][d] += gd * (1.0 - y[d] * y[d]);
                    }
                }
                Op::Softplus(a) => {
                    let xv = &self.nodes[a.0].value;
                    for (d, &gd) in g.iter().enumerate() {
                        grads[a.0][d] += gd * sigmoid(xv[d]);
                    }
                }
                Op::Ln(a) => {
                    let xv = &self.nodes[a.0].value;
                    for (d, &gd) in g.iter().enumerate() {
                        grads[a.0][d] += gd / xv[d];
                    }
                }
                Op::MeanMany(parts) => {
                    let scale = 1.0 / parts.len() as f64;
                    for &p in parts {
                        for (d, &gd) in g.iter().enumerate() {
                            grads[p.0][d] += gd * scale;
                        }
                    }
                }
                Op::LogSumExp(a) => {
                    let y = self.nodes[i].value[0];
                    let xv = &self.nodes[a.0].value;
                    for (d, &x) in xv.iter().enumerate() {
                        grads[a.0][d] += g[0] * (x - y).exp();
                    }
                }
                Op::DotConst(a, weights) => {
                    for (d, w) in weights.iter().enumerate() {
                        grads[a.0][d] += g[0] * w;
                    }
                }
                Op::MseConst(a, target) => {
                    let xv = &self.nodes[a.0].value;
                    let dim = target.len().max(1) as f64;
                    for d in 0..target.len() {
                        grads[a.0][d] += g[0] * 2.0 * (xv[d] - target[d]) / dim;
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(id, w) in terms {
                        grads[id.0][0] += g[0] * w;
                    }
                }
            }
            grads[i] = g;
        }
        Ok(Gradients { grads })
    }
}

/// Adjoints per node from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    /// Central finite differences of a scalar-valued tape program with
    /// respect to one leaf.
    fn finite_diff<F>(build: F, leaf_values: &[f64], eps: f64) -> Vec<f64>
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let eval = |values: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let leaf = tape.leaf(values.to_vec());
            let root = build(&mut tape, leaf);
            tape.scalar(root)
        };
        (0..leaf_values.len())
            .map(|d| {
                let mut plus = leaf_values.to_vec();
                let mut minus = leaf_values.to_vec();
                plus[d] += eps;
                minus[d] -= eps;
                (eval(&plus) - eval(&minus)) / (2.0 * eps)
            })
            .collect()
    }

    fn check_against_fd<F>(build: F, leaf_values: Vec<f64>)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId + Copy,
    {
        let mut tape = Tape::new();
        let leaf = tape.leaf(leaf_values.clone());
        let root = build(&mut tape, leaf);
        let grads = tape.backward(root).unwrap();
        let fd = finite_diff(build, &leaf_values, 1e-5);
        for (d, (&a, &b)) in grads.wrt(leaf).iter().zip(&fd).enumerate() {
            assert!(
                (a - b).abs() <= 1e-4 * b.abs().max(1.0) + 1e-7,
                "dim {d}: analytic {a} vs fd {b}"
            );
        }
    }

    #[test]
    fn matvec_gradients_match_fd() {
        // Differentiate through both the matrix and the vector.
        let w_vals = vec![0.3, -0.7, 1.2, 0.5, -0.1, 0.9];
        check_against_fd(
            move |tape, leaf| {
                let x = tape.leaf(vec![0.4, -1.1]);
                let y = tape.matvec(leaf, x, 3, 2);
                let sq = tape.mse_const(y, vec![0.0, 0.0, 0.0]);
                sq
            },
            w_vals,
        );
        let x_vals = vec![0.4, -1.1];
        check_against_fd(
            move |tape, leaf| {
                let w = tape.leaf(vec![0.3, -0.7, 1.2, 0.5, -0.1, 0.9]);
                let y = tape.matvec(w, leaf, 3, 2);
                tape.mse_const(y, vec![1.0, -1.0, 0.5])
            },
            x_vals,
        );
    }

    #[test]
    fn nonlinearity_gradients_match_fd() {
        check_against_fd(
            |tape, leaf| {
                let t = tape.tanh(leaf);
                let s = tape.softplus(t);
                let lse = tape.log_sum_exp(s);
                lse
            },
            vec![0.2, -1.5, 3.0, 0.0],
        );
        // Ln through a softplus keeps the argument positive.
        check_against_fd(
            |tape, leaf| {
                let sp = tape.softplus(leaf);
                let l = tape.ln(sp);
                tape.dot_const(l, vec![1.0, -2.0, 0.5])
            },
            vec![0.5, 2.0, -0.3],
        );
    }

    #[test]
    fn structural_op_gradients_match_fd() {
        check_against_fd(
            |tape, leaf| {
                let other = tape.leaf(vec![1.0, 2.0, 3.0]);
                let mean = tape.mean_many(&[leaf, other]);
                let cat = tape.concat(&[mean, leaf]);
                let scaled = tape.scale(cat, 0.7);
                let shifted = tape.add_const(scaled, 0.1);
                tape.mse_const(shifted, vec![0.5; 6])
            },
            vec![-0.4, 0.9, 0.1],
        );
        check_against_fd(
            |tape, leaf| {
                let a = tape.softplus(leaf);
                let b = tape.tanh(leaf);
                let sum = tape.add(a, b);
                let lse = tape.log_sum_exp(sum);
                let sp = tape.softplus(leaf);
                let d = tape.dot_const(sp, vec![0.3, 0.3]);
                tape.weighted_sum(&[(lse, 2.0), (d, -1.0)])
            },
            vec![0.7, -0.2],
        );
    }

    #[test]
    fn random_composite_graphs_match_fd() {
        let mut rng = SplitRng::seed_from_u64(99);
        for _ in 0..25 {
            let vals: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            check_against_fd(
                |tape, leaf| {
                    let w = tape.leaf(vec![0.2, -0.4, 0.6, 0.1, 0.5, -0.3, 0.7, 0.9]);
                    let h = tape.matvec(w, leaf, 2, 4);
                    let t = tape.tanh(h);
                    let lse = tape.log_sum_exp(t);
                    let m = tape.mse_const(t, vec![0.3, -0.3]);
                    tape.weighted_sum(&[(lse, 1.0), (m, 0.5)])
                },
                vals,
            );
        }
    }

    #[test]
    fn gather_row_gradients_match_fd() {
        check_against_fd(
            |tape, leaf| {
                let r0 = tape.gather_row(leaf, 0, 2);
                let r2 = tape.gather_row(leaf, 2, 2);
                let sum = tape.add(r0, r2);
                tape.mse_const(sum, vec![1.0, -1.0])
            },
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        );
    }

    #[test]
    fn nan_guard_names_the_node() {
        let mut tape = Tape::new();
        let leaf = tape.leaf(vec![-1.0]);
        let bad = tape.ln(leaf); // ln(-1) = NaN in the forward pass
        let root = tape.weighted_sum(&[(bad, 1.0)]);
        let err = tape.backward(root).unwrap_err();
        assert_eq!(
            err,
            TapeError::NonFiniteValue {
                node: bad.0,
                op: "ln"
            }
        );
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let leaf = tape.leaf(vec![1.0, 2.0]);
        assert_eq!(tape.backward(leaf).unwrap_err(), TapeError::NonScalarRoot);
    }
}
