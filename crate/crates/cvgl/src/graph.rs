//! Reverse-mode automatic differentiation over `Array2<f64>`.
//!
//! A [`Graph`] is an eager define-by-run tape: every op computes its value
//! immediately and records how to propagate gradients. Named leaves are
//! idempotent per graph, so a parameter referenced from several branches
//! (e.g. a weight-sharing twin encoder) is a single node and its gradient
//! accumulates across all uses.
//!
//! Shape mismatches inside the tape are programming errors and panic;
//! public API functions validate their inputs before building a graph.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    /// `(m, n) + (1, n)` broadcast over rows.
    AddRow(VarId, VarId),
    /// `(m, n) + (m, 1)` broadcast over columns.
    AddCol(VarId, VarId),
    Sub(VarId, VarId),
    MulScalar(VarId, f64),
    /// Multiply by a `(1, 1)` variable.
    MulScalarVar(VarId, VarId),
    /// `(m, n) ⊙ (m, 1)` broadcast over columns.
    MulCol(VarId, VarId),
    /// Elementwise product of same-shape matrices.
    Mul(VarId, VarId),
    Recip(VarId),
    Relu(VarId),
    Exp(VarId),
    Ln(VarId),
    ClampMin(VarId, f64),
    Transpose(VarId),
    Reshape(VarId),
    SoftmaxRows(VarId),
    /// Row-wise layer norm: `(x, gamma, beta)` with gamma/beta `(1, n)`.
    LayerNormRows(VarId, VarId, VarId, f64),
    SumAxis0(VarId),
    MeanAxis0(VarId),
    MeanAll(VarId),
    ConcatCols(VarId, VarId),
    ConcatRows(VarId, VarId),
    /// Diagonal of a square matrix as a column vector.
    DiagCol(VarId),
    /// Row-wise `log Σ exp` as a column vector (max-subtracted).
    LogSumExpRows(VarId),
    /// Row-wise L2 normalization.
    NormalizeRows(VarId),
    /// Row-wise L2 normalization that passes near-zero rows through
    /// unchanged instead of failing.
    NormalizeRowsSafe(VarId),
}

const SAFE_NORM_FLOOR: f64 = 1e-12;

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Eager reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: BTreeMap<String, VarId>,
}

/// Gradients of a scalar root with respect to every node that influences it.
pub struct Grads {
    by_id: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient for `id`, or `None` if the node does not influence the root.
    pub fn get(&self, id: VarId) -> Option<&Array2<f64>> {
        self.by_id.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> VarId {
        self.push(Op::Leaf, value)
    }

    /// Leaf registered under `name`. Repeated calls with the same name return
    /// the existing node so gradients from every use accumulate in one place.
    pub fn named_leaf(&mut self, name: &str, value: Array2<f64>) -> VarId {
        if let Some(&id) = self.named.get(name) {
            return id;
        }
        let id = self.leaf(value);
        self.named.insert(name.to_string(), id);
        id
    }

    pub fn named_id(&self, name: &str) -> Option<VarId> {
        self.named.get(name).copied()
    }

    pub fn named_ids(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.named.iter().map(|(n, &id)| (n.as_str(), id))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (am, an) = dims(self.value(a));
        let (bm, bn) = dims(self.value(b));
        assert_eq!(an, bm, "matmul: inner dims {an} vs {bm}");
        let _ = (am, bn);
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (_, n) = dims(self.value(a));
        assert_eq!(self.value(row).dim(), (1, n), "add_row: row must be (1, {n})");
        let v = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), v)
    }

    pub fn add_col(&mut self, a: VarId, col: VarId) -> VarId {
        let (m, _) = dims(self.value(a));
        assert_eq!(self.value(col).dim(), (m, 1), "add_col: col must be ({m}, 1)");
        let v = self.value(a) + self.value(col);
        self.push(Op::AddCol(a, col), v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul_scalar(&mut self, a: VarId, s: f64) -> VarId {
        let v = self.value(a) * s;
        self.push(Op::MulScalar(a, s), v)
    }

    pub fn mul_scalar_var(&mut self, a: VarId, s: VarId) -> VarId {
        assert_eq!(self.value(s).dim(), (1, 1), "mul_scalar_var: scalar must be (1, 1)");
        let sv = self.value(s)[[0, 0]];
        let v = self.value(a) * sv;
        self.push(Op::MulScalarVar(a, s), v)
    }

    pub fn mul_col(&mut self, a: VarId, col: VarId) -> VarId {
        let (m, _) = dims(self.value(a));
        assert_eq!(self.value(col).dim(), (m, 1), "mul_col: col must be ({m}, 1)");
        let v = self.value(a) * self.value(col);
        self.push(Op::MulCol(a, col), v)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn recip(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let v = self.value(a).mapv(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn clamp_min(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).mapv(|x| x.max(c));
        self.push(Op::ClampMin(a, c), v)
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), v)
    }

    pub fn reshape(&mut self, a: VarId, rows: usize, cols: usize) -> VarId {
        let (m, n) = dims(self.value(a));
        assert_eq!(m * n, rows * cols, "reshape: {m}x{n} -> {rows}x{cols}");
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(Op::Reshape(a), v)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let v = softmax_rows_value(self.value(a));
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn layer_norm_rows(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let (_, n) = dims(self.value(x));
        assert_eq!(self.value(gamma).dim(), (1, n), "layer_norm: gamma must be (1, {n})");
        assert_eq!(self.value(beta).dim(), (1, n), "layer_norm: beta must be (1, {n})");
        let (xhat, sigma) = layer_norm_stats(self.value(x), eps);
        let _ = sigma;
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(Op::LayerNormRows(x, gamma, beta, eps), v)
    }

    pub fn sum_axis0(&mut self, a: VarId) -> VarId {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::SumAxis0(a), v)
    }

    pub fn mean_axis0(&mut self, a: VarId) -> VarId {
        let (m, _) = dims(self.value(a));
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0)) / m as f64;
        self.push(Op::MeanAxis0(a), v)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let (m, n) = dims(self.value(a));
        let mean = self.value(a).sum() / (m * n) as f64;
        let v = Array2::from_elem((1, 1), mean);
        self.push(Op::MeanAll(a), v)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (am, _) = dims(self.value(a));
        let (bm, _) = dims(self.value(b));
        assert_eq!(am, bm, "concat_cols: row count mismatch");
        let v = concatenate![Axis(1), self.value(a).view(), self.value(b).view()];
        self.push(Op::ConcatCols(a, b), v)
    }

    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> VarId {
        let (_, an) = dims(self.value(a));
        let (_, bn) = dims(self.value(b));
        assert_eq!(an, bn, "concat_rows: column count mismatch");
        let v = concatenate![Axis(0), self.value(a).view(), self.value(b).view()];
        self.push(Op::ConcatRows(a, b), v)
    }

    pub fn diag_col(&mut self, a: VarId) -> VarId {
        let (m, n) = dims(self.value(a));
        assert_eq!(m, n, "diag_col: matrix must be square");
        let v = Array2::from_shape_fn((m, 1), |(i, _)| self.value(a)[[i, i]]);
        self.push(Op::DiagCol(a), v)
    }

    pub fn log_sum_exp_rows(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let (m, _) = dims(x);
        let mut v = Array2::zeros((m, 1));
        for i in 0..m {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&e| (e - max).exp()).sum();
            v[[i, 0]] = max + sum.ln();
        }
        self.push(Op::LogSumExpRows(a), v)
    }

    /// Row-wise L2 normalization. Fails if any row norm is below `1e-12`.
    pub fn normalize_rows(&mut self, a: VarId) -> Result<VarId> {
        let x = self.value(a);
        let (m, _) = dims(x);
        let mut v = x.clone();
        for i in 0..m {
            let norm = x.row(i).iter().map(|e| e * e).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateEmbedding(format!(
                    "row {i} has L2 norm {norm:.3e}; refusing to normalize"
                )));
            }
            v.row_mut(i).mapv_inplace(|e| e / norm);
        }
        Ok(self.push(Op::NormalizeRows(a), v))
    }

    /// Row-wise L2 normalization; rows with norm below `1e-12` are left
    /// unchanged (used for per-cluster normalization where empty clusters
    /// are legitimate).
    pub fn normalize_rows_safe(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let (m, _) = dims(x);
        let mut v = x.clone();
        for i in 0..m {
            let norm = x.row(i).iter().map(|e| e * e).sum::<f64>().sqrt();
            if norm >= SAFE_NORM_FLOOR {
                v.row_mut(i).mapv_inplace(|e| e / norm);
            }
        }
        self.push(Op::NormalizeRowsSafe(a), v)
    }

    /// Gradients of `root` with respect to every upstream node. The root is
    /// seeded with ones; pass a `(1, 1)` scalar node for a well-defined loss.
    pub fn backward(&self, root: VarId) -> Grads {
        let mut by_id: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        by_id[root.0] = Some(Array2::ones(self.value(root).dim()));

        for i in (0..=root.0).rev() {
            let g = match by_id[i].clone() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(b).t());
                    let gb = self.value(a).t().dot(&g);
                    accumulate(&mut by_id, a, ga);
                    accumulate(&mut by_id, b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut by_id, a, g.clone());
                    accumulate(&mut by_id, b, g);
                }
                Op::AddRow(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut by_id, a, g);
                    accumulate(&mut by_id, row, grow);
                }
                Op::AddCol(a, col) => {
                    let gcol = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut by_id, a, g);
                    accumulate(&mut by_id, col, gcol);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut by_id, a, g.clone());
                    accumulate(&mut by_id, b, -g);
                }
                Op::MulScalar(a, s) => accumulate(&mut by_id, a, g * s),
                Op::MulScalarVar(a, s) => {
                    let sv = self.value(s)[[0, 0]];
                    let gs = (&g * self.value(a)).sum();
                    accumulate(&mut by_id, a, g * sv);
                    accumulate(&mut by_id, s, Array2::from_elem((1, 1), gs));
                }
                Op::MulCol(a, col) => {
                    let ga = &g * self.value(col);
                    let gcol = (&g * self.value(a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut by_id, a, ga);
                    accumulate(&mut by_id, col, gcol);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(b);
                    let gb = &g * self.value(a);
                    accumulate(&mut by_id, a, ga);
                    accumulate(&mut by_id, b, gb);
                }
                Op::Recip(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut by_id, a, -(&g * y * y));
                }
                Op::Relu(a) => {
                    let mask = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut by_id, a, g * mask);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut by_id, a, g * y);
                }
                Op::Ln(a) => {
                    let gx = &g / self.value(a);
                    accumulate(&mut by_id, a, gx);
                }
                Op::ClampMin(a, c) => {
                    let mask = self.value(a).mapv(|x| if x > c { 1.0 } else { 0.0 });
                    accumulate(&mut by_id, a, g * mask);
                }
                Op::Transpose(a) => accumulate(&mut by_id, a, g.t().to_owned()),
                Op::Reshape(a) => {
                    let dim = self.value(a).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let gx = Array2::from_shape_vec(dim, flat).expect("reshape grad");
                    accumulate(&mut by_id, a, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gx = y * &(&g - &dot);
                    accumulate(&mut by_id, a, gx);
                }
                Op::LayerNormRows(x, gamma, beta, eps) => {
                    let (xhat, sigma) = layer_norm_stats(self.value(x), eps);
                    let n = dims(self.value(x)).1 as f64;
                    let ggamma = (&g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gxhat = &g * self.value(gamma);
                    let m1 = gxhat.sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
                    let m2 = (&gxhat * &xhat).sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
                    let gx = (&gxhat - &m1 - &xhat * &m2) / &sigma;
                    accumulate(&mut by_id, x, gx);
                    accumulate(&mut by_id, gamma, ggamma);
                    accumulate(&mut by_id, beta, gbeta);
                }
                Op::SumAxis0(a) => {
                    let (m, _) = dims(self.value(a));
                    let mut gx = Array2::zeros(self.value(a).dim());
                    for r in 0..m {
                        gx.row_mut(r).assign(&g.row(0));
                    }
                    accumulate(&mut by_id, a, gx);
                }
                Op::MeanAxis0(a) => {
                    let (m, _) = dims(self.value(a));
                    let mut gx = Array2::zeros(self.value(a).dim());
                    for r in 0..m {
                        gx.row_mut(r).assign(&(&g.row(0) / m as f64));
                    }
                    accumulate(&mut by_id, a, gx);
                }
                Op::MeanAll(a) => {
                    let (m, n) = dims(self.value(a));
                    let gx = Array2::from_elem((m, n), g[[0, 0]] / (m * n) as f64);
                    accumulate(&mut by_id, a, gx);
                }
                Op::ConcatCols(a, b) => {
                    let (_, an) = dims(self.value(a));
                    let ga = g.slice(ndarray::s![.., ..an]).to_owned();
                    let gb = g.slice(ndarray::s![.., an..]).to_owned();
                    accumulate(&mut by_id, a, ga);
                    accumulate(&mut by_id, b, gb);
                }
                Op::ConcatRows(a, b) => {
                    let (am, _) = dims(self.value(a));
                    let ga = g.slice(ndarray::s![..am, ..]).to_owned();
                    let gb = g.slice(ndarray::s![am.., ..]).to_owned();
                    accumulate(&mut by_id, a, ga);
                    accumulate(&mut by_id, b, gb);
                }
                Op::DiagCol(a) => {
                    let (m, _) = dims(self.value(a));
                    let mut gx = Array2::zeros(self.value(a).dim());
                    for r in 0..m {
                        gx[[r, r]] = g[[r, 0]];
                    }
                    accumulate(&mut by_id, a, gx);
                }
                Op::LogSumExpRows(a) => {
                    let soft = softmax_rows_value(self.value(a));
                    let gx = soft * &g; // g is (m, 1), broadcast over columns
                    accumulate(&mut by_id, a, gx);
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(a);
                    let y = &self.nodes[i].value;
                    let (m, _) = dims(x);
                    let mut gx = Array2::zeros(x.dim());
                    for r in 0..m {
                        let norm = x.row(r).iter().map(|e| e * e).sum::<f64>().sqrt();
                        let yg: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..x.dim().1 {
                            gx[[r, c]] = (g[[r, c]] - y[[r, c]] * yg) / norm;
                        }
                    }
                    accumulate(&mut by_id, a, gx);
                }
                Op::NormalizeRowsSafe(a) => {
                    let x = self.value(a);
                    let y = &self.nodes[i].value;
                    let (m, _) = dims(x);
                    let mut gx = Array2::zeros(x.dim());
                    for r in 0..m {
                        let norm = x.row(r).iter().map(|e| e * e).sum::<f64>().sqrt();
                        if norm < SAFE_NORM_FLOOR {
                            for c in 0..x.dim().1 {
                                gx[[r, c]] = g[[r, c]]; // identity on passed-through rows
                            }
                        } else {
                            let yg: f64 =
                                y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                            for c in 0..x.dim().1 {
                                gx[[r, c]] = (g[[r, c]] - y[[r, c]] * yg) / norm;
                            }
                        }
                    }
                    accumulate(&mut by_id, a, gx);
                }
            }
        }
        Grads { by_id }
    }
}

fn dims(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

fn accumulate(by_id: &mut [Option<Array2<f64>>], id: VarId, g: Array2<f64>) {
    match &mut by_id[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let (m, n) = x.dim();
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&e| (e - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out[[i, j]] = e / sum;
        }
    }
    out
}

/// Returns `(xhat, sigma)` where `xhat` is the row-standardized input and
/// `sigma` is the `(m, 1)` column of `sqrt(var + eps)` (biased variance).
fn layer_norm_stats(x: &Array2<f64>, eps: f64) -> (Array2<f64>, Array2<f64>) {
    let (m, n) = x.dim();
    let mut xhat = Array2::zeros((m, n));
    let mut sigma = Array2::zeros((m, 1));
    for i in 0..m {
        let row = x.row(i);
        let mu = row.sum() / n as f64;
        let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / n as f64;
        let s = (var + eps).sqrt();
        sigma[[i, 0]] = s;
        for j in 0..n {
            xhat[[i, j]] = (x[[i, j]] - mu) / s;
        }
    }
    (xhat, sigma)
}
