//! Wengert-list reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so every node's inputs have a
//! smaller index than the node itself and a single reverse sweep visits each
//! node once. [`Tape::stop_gradient`] is an identity in the forward pass and
//! a wall in the backward pass.

use std::collections::BTreeMap;

use super::tensor::{gemm, matmul};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `[rows, n] + [1, n]`, the row broadcast used by dense-layer biases.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Sigmoid(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    Mean(NodeId),
    Sum(NodeId),
    StopGradient,
    Gather(NodeId, Vec<usize>),
    MeanPool(NodeId, Vec<Vec<usize>>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Places the current value of a stored parameter on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(bias));
        let cols = av.cols();
        assert_eq!(bv.len(), cols, "bias width {} vs {}", bv.len(), cols);
        let mut out = av.clone();
        for row in out.values_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.values()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    /// Element-wise product of equally shaped operands.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul inner dims");
        let v = matmul(av, bv);
        self.push(v, Op::MatMul(a, b))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat row mismatch");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.push(Tensor::matrix(rows, total, out), Op::Concat(parts.to_vec()))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Mean of all elements, as a `[1, 1]` scalar.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient)
    }

    /// Row lookup into a `[vocab, dim]` table: the embedding primitive.
    pub fn gather(&mut self, table: NodeId, rows: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let dim = t.cols();
        let mut out = Vec::with_capacity(rows.len() * dim);
        for &r in &rows {
            out.extend_from_slice(t.row_slice(r));
        }
        let v = Tensor::matrix(rows.len(), dim, out);
        self.push(v, Op::Gather(table, rows))
    }

    /// Per output row, the mean of the listed table rows (zero if the list is empty).
    pub fn mean_pool(&mut self, table: NodeId, lists: Vec<Vec<usize>>) -> NodeId {
        let t = self.value(table);
        let dim = t.cols();
        let mut out = vec![0.0; lists.len() * dim];
        for (i, list) in lists.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let dst = &mut out[i * dim..(i + 1) * dim];
            for &r in list {
                for (d, s) in dst.iter_mut().zip(t.row_slice(r)) {
                    *d += s;
                }
            }
            let inv = 1.0 / list.len() as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let v = Tensor::matrix(lists.len(), dim, out);
        self.push(v, Op::MeanPool(table, lists))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param(_) | Op::StopGradient => {
                    // Leaves keep their gradient; stop-gradient swallows it.
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let cols = g.cols();
                    let mut gb = vec![0.0; cols];
                    for row in g.values().chunks(cols) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *bias, Tensor::new(shape, gb)?);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| x * c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.values(), (n, 1), bv.values(), (1, n), &mut ga, 0.0);
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.values(), (1, k), g.values(), (n, 1), &mut gb, 0.0);
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.values()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::matrix(rows, w, gp));
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, z| if z > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), |x, z| x / z);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |x, z| 2.0 * x * z);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip_map(self.value(*a), |x, z| if z > lo && z < hi { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let s = g.item() / av.len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(av.shape(), s));
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::full(av.shape(), g.item()));
                }
                Op::Gather(table, rows) => {
                    let tv = self.value(*table);
                    let dim = tv.cols();
                    let mut gt = Tensor::zeros(tv.shape());
                    let buf = gt.values_mut();
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, s) in buf[r * dim..(r + 1) * dim].iter_mut().zip(g.row_slice(i)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::MeanPool(table, lists) => {
                    let tv = self.value(*table);
                    let dim = tv.cols();
                    let mut gt = Tensor::zeros(tv.shape());
                    let buf = gt.values_mut();
                    for (i, list) in lists.iter().enumerate() {
                        if list.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / list.len() as f64;
                        for &r in list {
                            for (d, s) in buf[r * dim..(r + 1) * dim].iter_mut().zip(g.row_slice(i)) {
                                *d += s * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
            }
        }

        let mut params = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(pid) = node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                params
                    .entry(pid)
                    .and_modify(|acc: &mut Tensor| acc.add_assign(&g))
                    .or_insert(g);
            }
        }
        Ok(Gradients { params, nodes: grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
///
/// Every parameter placed on the tape before the loss node gets an entry,
/// zero when no path reaches it (for example because it sits behind a
/// stop-gradient).
#[derive(Debug)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient for `id`, or zeros shaped like the stored value if `id` never
    /// appeared on the tape.
    pub fn param_or_zero(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient that reached a leaf or stop-gradient node, if any.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(store: &mut ParamStore, name: &str, v: f64) -> ParamId {
        store.add(name, Tensor::scalar(v))
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        let s = sigmoid(50.0);
        assert!(s < 1.0 + f64::EPSILON && s > 1.0 - 1e-6);
        for x in [-30.0, -2.5, -0.1, 0.7, 4.0, 19.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }
        assert!(!sigmoid(-1000.0).is_nan() && !sigmoid(1000.0).is_nan());
    }

    #[test]
    fn linear_gradient() {
        let mut store = ParamStore::new();
        let w = scalar_param(&mut store, "w", 0.7);
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let x = tape.constant(Tensor::scalar(3.0));
        let loss = tape.mul(wn, x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap().item(), 3.0);
    }

    #[test]
    fn stop_gradient_forward_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(3.2));
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s).item(), 3.2);
    }

    #[test]
    fn stop_gradient_treats_operand_as_constant() {
        // f(x) = x * [x] at x = 2 has gradient 2, not 4.
        let mut store = ParamStore::new();
        let x = scalar_param(&mut store, "x", 2.0);
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let frozen = tape.stop_gradient(xn);
        let f = tape.mul(xn, frozen);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.param(x).unwrap().item(), 2.0);
    }

    #[test]
    fn loss_behind_stop_gradient_has_zero_upstream_gradient() {
        let mut store = ParamStore::new();
        let w = scalar_param(&mut store, "w", 1.5);
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let x = tape.constant(Tensor::scalar(3.0));
        let wx = tape.mul(wn, x);
        let s = tape.stop_gradient(wx);
        let sq = tape.square(s);
        let loss = tape.sigmoid(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap().item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut store = ParamStore::new();
        let w = scalar_param(&mut store, "w", 3.0);
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        let loss = tape.mul(a, b);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap().item(), 6.0);
    }

    #[test]
    fn gather_and_pool_scatter_gradients() {
        let mut store = ParamStore::new();
        let t = store.add("table", Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]));
        let mut tape = Tape::new();
        let tn = tape.param(&store, t);
        let gathered = tape.gather(tn, vec![2, 2, 0]);
        assert_eq!(tape.value(gathered).values(), &[5., 6., 5., 6., 1., 2.]);
        let pooled = tape.mean_pool(tn, vec![vec![0, 1], vec![]]);
        assert_eq!(tape.value(pooled).values(), &[2., 3., 0., 0.]);
        let s1 = tape.sum(gathered);
        let s2 = tape.sum(pooled);
        let loss = tape.add(s1, s2);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(t).unwrap().values(), &[1.5, 1.5, 0.5, 0.5, 2., 2.]);
    }

    #[test]
    fn matmul_gradient_matches_hand() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let b = store.add("b", Tensor::matrix(2, 1, vec![3.0, 4.0]));
        let mut tape = Tape::new();
        let an = tape.param(&store, a);
        let bn = tape.param(&store, b);
        let c = tape.matmul(an, bn);
        assert_eq!(tape.value(c).item(), 11.0);
        let g = tape.backward(c).unwrap();
        assert_eq!(g.param(a).unwrap().values(), &[3.0, 4.0]);
        assert_eq!(g.param(b).unwrap().values(), &[1.0, 2.0]);
    }
}
