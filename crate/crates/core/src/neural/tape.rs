//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node
//! holding its value. [`Graph::backward`] walks the nodes in reverse
//! creation order and accumulates gradients into every parameter that the
//! output depends on. Nodes that only depend on constants are skipped.
//!
//! Besides the usual dense-layer primitives the tape has a fused LSTM step
//! and dedicated nodes for the rule losses (set NLL, KL to uniform and the
//! adjacent bilinear transition penalty), which keeps per-token graphs
//! small.

use super::params::{ParamId, ParamSet};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulBt(NodeId, NodeId),
    /// Adds a `1 × c` row to every row.
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    SliceCols { src: NodeId, start: usize },
    SliceRows { src: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows { src: NodeId, rows: Vec<usize> },
    SoftmaxRows(NodeId),
    LayerNorm { src: NodeId, gain: NodeId, bias: NodeId, xhat: Tensor, rstd: Vec<f64> },
    /// Output is `[h | c]`; `acts` caches the activated gates `i, f, g, o`.
    LstmStep { gates_in: NodeId, prev: Option<NodeId>, w_hh: NodeId, acts: Vec<f64> },
    SumAll(NodeId),
    MeanRows(NodeId),
    SetNll { probs: NodeId, targets: Vec<(usize, Vec<usize>)> },
    KlUniform { probs: NodeId, rows: Vec<usize> },
    AdjacentBilinear { probs: NodeId, matrix: NodeId },
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every tensor of a [`ParamSet`], in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(Vec<Tensor>);

impl Gradients {
    pub fn zeros(params: &ParamSet) -> Self {
        Self(params.zeros_like())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.0
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|t| t.scale_assign(s));
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `Σ_j p_j ln(p_j |T|)` with `0 ln 0 = 0`.
pub fn kl_to_uniform(p: &[f64]) -> f64 {
    let t = p.len() as f64;
    p.iter().filter(|&&v| v > 0.0).map(|&v| v * (v * t).ln()).sum()
}

/// `-ln(max(Σ_{y ∈ targets} p_y, ε))`.
pub fn set_nll(p: &[f64], targets: &[usize]) -> f64 {
    let s: f64 = targets.iter().map(|&t| p[t]).sum();
    -s.max(LOG_EPS).ln()
}

/// `Σ_i p_i M p_{i+1}` over consecutive rows of `probs`.
pub fn adjacent_bilinear(probs: &Tensor, matrix: &Tensor) -> f64 {
    let t = probs.cols();
    let mut total = 0.0;
    for i in 0..probs.rows().saturating_sub(1) {
        let (a, b) = (probs.row(i), probs.row(i + 1));
        for j in 0..t {
            if a[j] == 0.0 {
                continue;
            }
            let mrow = matrix.row(j);
            total += a[j] * mrow.iter().zip(b).map(|(m, q)| m * q).sum::<f64>();
        }
    }
    total
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.nodes[id.0].op {
            Op::Param(p) => self.params.get(p),
            _ => &self.nodes[id.0].value,
        }
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const, false)
    }

    /// The node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        let n = self.push(Tensor::default(), Op::Param(id), true);
        self.param_nodes[id.index()] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, _) = self.shape(a);
        let (_, n) = self.shape(b);
        let mut out = Tensor::zeros(m, n);
        gemm(1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, _) = self.shape(a);
        let (n, _) = self.shape(b);
        let mut out = Tensor::zeros(m, n);
        gemm(1.0, self.value(a), false, self.value(b), true, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMulBt(a, b), ng)
    }

    /// `x · Wᵀ + b` for a weight stored as `out × in`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul_bt(x, w);
        self.add_bias(y, b)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((1, out.cols()), b.shape(), "bias shape");
        for r in 0..out.rows() {
            for (v, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let mut out = self.value(a).clone();
        for (v, w) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= w;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(src);
        assert!(start + len <= v.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        let ng = self.needs(src);
        self.push(out, Op::SliceCols { src, start }, ng)
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(src);
        assert!(start + len <= v.rows(), "slice_rows out of range");
        let c = v.cols();
        let out = Tensor::from_vec(len, c, v.data()[start * c..(start + len) * c].to_vec());
        let ng = self.needs(src);
        self.push(out, Op::SliceRows { src, start }, ng)
    }

    pub fn row(&mut self, src: NodeId, r: usize) -> NodeId {
        self.slice_rows(src, r, 1)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Embedding lookup: selected rows of `src`, in the given order.
    pub fn gather_rows(&mut self, src: NodeId, rows: &[usize]) -> NodeId {
        let v = self.value(src);
        let c = v.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(v.row(r));
        }
        let ng = self.needs(src);
        self.push(
            Tensor::from_vec(rows.len(), c, data),
            Op::GatherRows { src, rows: rows.to_vec() },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn layer_norm(&mut self, src: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let x = self.value(src);
        let (rows, cols) = x.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        let ng = self.needs(src) || self.needs(gain) || self.needs(bias);
        self.push(out, Op::LayerNorm { src, gain, bias, xhat, rstd }, ng)
    }

    /// One LSTM step with gate order `i, f, g, o`.
    ///
    /// `gates_in` is the `1 × 4H` input contribution (input projection plus
    /// bias); `prev` is the previous `[h | c]` output, or zero state.
    pub fn lstm_step(&mut self, gates_in: NodeId, prev: Option<NodeId>, w_hh: NodeId) -> NodeId {
        let h = self.shape(w_hh).1;
        let mut z = self.value(gates_in).data().to_vec();
        assert_eq!(z.len(), 4 * h, "lstm gate width");
        let (h_prev, c_prev): (Vec<f64>, Vec<f64>) = match prev {
            Some(p) => {
                let v = self.value(p).data();
                (v[..h].to_vec(), v[h..].to_vec())
            }
            None => (vec![0.0; h], vec![0.0; h]),
        };
        if prev.is_some() {
            let w = self.value(w_hh);
            for (k, zk) in z.iter_mut().enumerate() {
                *zk += w.row(k).iter().zip(&h_prev).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        for k in 0..4 * h {
            z[k] = if (2 * h..3 * h).contains(&k) { z[k].tanh() } else { sigmoid(z[k]) };
        }
        let mut out = vec![0.0; 2 * h];
        for j in 0..h {
            let c = z[h + j] * c_prev[j] + z[j] * z[2 * h + j];
            out[h + j] = c;
            out[j] = z[3 * h + j] * c.tanh();
        }
        let ng = self.needs(gates_in) || self.needs(w_hh) || prev.is_some_and(|p| self.needs(p));
        self.push(
            Tensor::row_vector(out),
            Op::LstmStep { gates_in, prev, w_hh, acts: z },
            ng,
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = vec![0.0; v.cols()];
        for r in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let n = v.rows() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let ng = self.needs(a);
        self.push(Tensor::row_vector(out), Op::MeanRows(a), ng)
    }

    /// `Σ_(row, set) -ln(max(Σ_{y ∈ set} probs[row][y], ε))`.
    pub fn set_nll(&mut self, probs: NodeId, targets: Vec<(usize, Vec<usize>)>) -> NodeId {
        let p = self.value(probs);
        let s = targets.iter().map(|(r, ys)| set_nll(p.row(*r), ys)).sum();
        let ng = self.needs(probs);
        self.push(Tensor::scalar(s), Op::SetNll { probs, targets }, ng)
    }

    /// `Σ_row KL(probs[row] ‖ uniform)`.
    pub fn kl_uniform(&mut self, probs: NodeId, rows: Vec<usize>) -> NodeId {
        let p = self.value(probs);
        let s = rows.iter().map(|&r| kl_to_uniform(p.row(r))).sum();
        let ng = self.needs(probs);
        self.push(Tensor::scalar(s), Op::KlUniform { probs, rows }, ng)
    }

    /// `Σ_i probs[i] · M · probs[i+1]ᵀ`.
    pub fn adjacent_bilinear(&mut self, probs: NodeId, matrix: NodeId) -> NodeId {
        let s = adjacent_bilinear(self.value(probs), self.value(matrix));
        let ng = self.needs(probs) || self.needs(matrix);
        self.push(Tensor::scalar(s), Op::AdjacentBilinear { probs, matrix }, ng)
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let s = terms.iter().map(|&(n, w)| w * self.value(n).item()).sum();
        let ng = terms.iter().any(|&(n, _)| self.needs(n));
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("backward from a {}x{} node", lv.rows(), lv.cols())));
        }
        if !lv.item().is_finite() {
            return Err(Error::Numerical(format!("loss is {}", lv.item())));
        }
        let mut out = Gradients::zeros(self.params);
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor>], id: NodeId) -> Option<&'a mut Tensor> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let (r, c) = self.shape(id);
        Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let y = &node.value;
        match &node.op {
            Op::Const => {}
            Op::Param(p) => out.tensors_mut()[p.index()].add_assign(g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm(1.0, g, false, bv, true, 1.0, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm(1.0, av, true, g, false, 1.0, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm(1.0, g, false, bv, false, 1.0, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm(1.0, g, true, av, false, 1.0, gb);
                }
            }
            Op::AddBias(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if let Some(gx) = self.grad_slot(grads, *x) {
                        gx.add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gv), w) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * w;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((o, gv), w) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * w;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += s * gv;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data().to_vec();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gv), x) in ga.data_mut().iter_mut().zip(g.data()).zip(&xv) {
                        *o += gv * gelu_grad(*x);
                    }
                }
            }
            Op::SliceCols { src, start } => {
                if let Some(gs) = self.grad_slot(grads, *src) {
                    for r in 0..g.rows() {
                        let dst = &mut gs.row_mut(r)[*start..*start + g.cols()];
                        for (o, v) in dst.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SliceRows { src, start } => {
                if let Some(gs) = self.grad_slot(grads, *src) {
                    let c = g.cols();
                    let dst = &mut gs.data_mut()[start * c..(start + g.rows()) * c];
                    for (o, v) in dst.iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if let Some(gp) = self.grad_slot(grads, *p) {
                        for r in 0..g.rows() {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for p in parts {
                    let n = self.shape(*p).0 * c;
                    if let Some(gp) = self.grad_slot(grads, *p) {
                        for (o, v) in gp.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *o += v;
                        }
                    }
                    off += n;
                }
            }
            Op::GatherRows { src, rows } => {
                if let Some(gs) = self.grad_slot(grads, *src) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, v) in gs.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { src, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data().to_vec();
                let cols = g.cols();
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    for r in 0..g.rows() {
                        for ((o, d), xh) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += d * xh;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for r in 0..g.rows() {
                        for (o, d) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += d;
                        }
                    }
                }
                if let Some(gs) = self.grad_slot(grads, *src) {
                    for r in 0..g.rows() {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(&gv).map(|(d, w)| d * w).collect();
                        let xh = xhat.row(r);
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for ((o, d), x) in gs.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
                            *o += rstd[r] * (d - m1 - x * m2);
                        }
                    }
                }
            }
            Op::LstmStep { gates_in, prev, w_hh, acts } => {
                let h = acts.len() / 4;
                let (dh, dc) = g.data().split_at(h);
                let c = &y.data()[h..];
                let c_prev: Vec<f64> = match prev {
                    Some(p) => self.value(*p).data()[h..].to_vec(),
                    None => vec![0.0; h],
                };
                let (ig, fg, gg, og) = (&acts[..h], &acts[h..2 * h], &acts[2 * h..3 * h], &acts[3 * h..]);
                let mut dz = vec![0.0; 4 * h];
                let mut dc_prev = vec![0.0; h];
                for j in 0..h {
                    let tc = c[j].tanh();
                    let dct = dc[j] + dh[j] * og[j] * (1.0 - tc * tc);
                    dz[j] = dct * gg[j] * ig[j] * (1.0 - ig[j]);
                    dz[h + j] = dct * c_prev[j] * fg[j] * (1.0 - fg[j]);
                    dz[2 * h + j] = dct * ig[j] * (1.0 - gg[j] * gg[j]);
                    dz[3 * h + j] = dh[j] * tc * og[j] * (1.0 - og[j]);
                    dc_prev[j] = dct * fg[j];
                }
                if let Some(gi) = self.grad_slot(grads, *gates_in) {
                    for (o, v) in gi.data_mut().iter_mut().zip(&dz) {
                        *o += v;
                    }
                }
                if let Some(p) = prev {
                    let h_prev = self.value(*p).data()[..h].to_vec();
                    let w = self.value(*w_hh);
                    if let Some(gw) = self.grad_slot(grads, *w_hh) {
                        for (k, dzk) in dz.iter().enumerate() {
                            if *dzk != 0.0 {
                                for (o, hv) in gw.row_mut(k).iter_mut().zip(&h_prev) {
                                    *o += dzk * hv;
                                }
                            }
                        }
                    }
                    if let Some(gp) = self.grad_slot(grads, *p) {
                        let gd = gp.data_mut();
                        for (k, dzk) in dz.iter().enumerate() {
                            for (o, wv) in gd[..h].iter_mut().zip(w.row(k)) {
                                *o += dzk * wv;
                            }
                        }
                        for (o, v) in gd[h..].iter_mut().zip(&dc_prev) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let s = g.item();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            Op::MeanRows(a) => {
                let n = self.shape(*a).0 as f64;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..ga.rows() {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o += v / n;
                        }
                    }
                }
            }
            Op::SetNll { probs, targets } => {
                let s = g.item();
                let p = self.value(*probs);
                let sums: Vec<f64> = targets.iter().map(|(r, ys)| ys.iter().map(|&y| p.get(*r, y)).sum()).collect();
                if let Some(gp) = self.grad_slot(grads, *probs) {
                    for ((r, ys), mass) in targets.iter().zip(sums) {
                        if mass <= LOG_EPS {
                            continue;
                        }
                        let row = gp.row_mut(*r);
                        for &yi in ys {
                            row[yi] -= s / mass;
                        }
                    }
                }
            }
            Op::KlUniform { probs, rows } => {
                let s = g.item();
                let p = self.value(*probs);
                let t = p.cols() as f64;
                let rows_p: Vec<Vec<f64>> = rows.iter().map(|&r| p.row(r).to_vec()).collect();
                if let Some(gp) = self.grad_slot(grads, *probs) {
                    for (&r, pr) in rows.iter().zip(rows_p) {
                        for (o, v) in gp.row_mut(r).iter_mut().zip(pr) {
                            *o += s * ((v.max(LOG_EPS) * t).ln() + 1.0);
                        }
                    }
                }
            }
            Op::AdjacentBilinear { probs, matrix } => {
                let s = g.item();
                let p = self.value(*probs).clone();
                let m = self.value(*matrix).clone();
                let n = p.rows();
                if n < 2 {
                    return;
                }
                if let Some(gp) = self.grad_slot(grads, *probs) {
                    let mut mp = Tensor::zeros(n, p.cols()); // rows: M · p_iᵀ
                    gemm(1.0, &p, false, &m, true, 0.0, &mut mp);
                    let mut pm = Tensor::zeros(n, p.cols()); // rows: p_i · M
                    gemm(1.0, &p, false, &m, false, 0.0, &mut pm);
                    for i in 0..n - 1 {
                        for (o, v) in gp.row_mut(i).iter_mut().zip(mp.row(i + 1)) {
                            *o += s * v;
                        }
                        for (o, v) in gp.row_mut(i + 1).iter_mut().zip(pm.row(i)) {
                            *o += s * v;
                        }
                    }
                }
                if let Some(gm) = self.grad_slot(grads, *matrix) {
                    for i in 0..n - 1 {
                        for (j, a) in p.row(i).iter().enumerate() {
                            for (o, b) in gm.row_mut(j).iter_mut().zip(p.row(i + 1)) {
                                *o += s * a * b;
                            }
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let s = g.item();
                for (n, w) in terms {
                    if let Some(gn) = self.grad_slot(grads, *n) {
                        gn.data_mut()[0] += s * w;
                    }
                }
            }
        }
    }
}
