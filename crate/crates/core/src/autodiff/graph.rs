//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep is a single reverse scan.

use std::collections::BTreeMap;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Clamp(NodeId, f64, f64),
    Scale(NodeId, f64),
    Sum(NodeId),
    WindowMean(Vec<NodeId>),
    Concat(Vec<NodeId>),
    HalfSqDist(NodeId, NodeId),
    SoftmaxXent(NodeId, usize),
    Map {
        input: NodeId,
        derivative: fn(f64) -> f64,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only tape of tensor operations.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

/// Logistic function, evaluated without overflowing `exp`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn add_into(buf: &mut [f64], src: &[f64]) {
    for (b, s) in buf.iter_mut().zip(src) {
        *b += s;
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Registers a named trainable leaf. Registering the same name twice
    /// returns the existing node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param(name.to_owned()), value.clone());
        self.params.insert(name.to_owned(), id);
        id
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// `w · x` for a matrix `w` of shape `[rows, cols]` and a vector `x` of length `cols`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (wt, xt) = (self.value(w), self.value(x));
        if wt.shape().len() != 2 || xt.shape().len() != 1 || wt.shape()[1] != xt.len() {
            return Err(shape_err("matvec", wt, xt));
        }
        let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
        let (wd, xd) = (wt.data(), xt.data());
        let out = (0..rows)
            .map(|r| {
                wd[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(xd)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok(self.push(Op::MatVec(w, x), Tensor::vector(out)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.same_shape(bt) {
            return Err(shape_err(name, at, bt));
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log. Inputs must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Numerical(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clipped.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn window_mean(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Invalid("window_mean over an empty window".into()))?;
        let shape = self.value(*first).shape().to_vec();
        let mut acc = vec![0.0; self.value(*first).len()];
        for &id in inputs {
            let t = self.value(id);
            if t.shape() != shape.as_slice() {
                return Err(shape_err("window_mean", self.value(*first), t));
            }
            add_into(&mut acc, t.data());
        }
        let n = inputs.len() as f64;
        acc.iter_mut().for_each(|x| *x /= n);
        let value = Tensor::new(shape, acc)?;
        Ok(self.push(Op::WindowMean(inputs.to_vec()), value))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &id in inputs {
            let t = self.value(id);
            if t.shape().len() > 1 {
                return Err(shape_err("concat", self.value(inputs[0]), t));
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Op::Concat(inputs.to_vec()), Tensor::vector(data)))
    }

    /// `½ Σ (a − b)²` as a scalar.
    pub fn half_sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.same_shape(bt) {
            return Err(shape_err("half_sq_dist", at, bt));
        }
        let s: f64 = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::HalfSqDist(a, b), Tensor::scalar(0.5 * s)))
    }

    /// Negative log of `softmax(logits)[label]`.
    pub fn softmax_xent(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let t = self.value(logits);
        if t.shape().len() != 1 || label >= t.len() {
            return Err(Error::LabelOutOfRange {
                frame: 0,
                label,
                count: t.len(),
            });
        }
        let m = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + t.data().iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[label];
        Ok(self.push(Op::SoftmaxXent(logits, label), Tensor::scalar(loss)))
    }

    /// Elementwise user function with an explicitly supplied derivative.
    pub fn map(&mut self, a: NodeId, f: fn(f64) -> f64, derivative: fn(f64) -> f64) -> NodeId {
        self.unary(
            a,
            f,
            Op::Map {
                input: a,
                derivative,
            },
        )
    }

    pub fn backward(&self, loss: NodeId) -> Result<ParamSet> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Gradient of `seed · loss` with respect to every registered parameter.
    /// Parameters that do not influence `loss` get exact zeros.
    pub fn backward_with_seed(&self, loss: NodeId, seed: f64) -> Result<ParamSet> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        let mut out = ParamSet::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let x = node.value.data();
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    out.insert(name.clone(), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatVec(w, v) => {
                    let wt = self.value(*w);
                    let cols = wt.shape()[1];
                    let vd = self.value(*v).data();
                    {
                        let gw = slot(&mut grads, *w, wt.len());
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            for (dst, xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(vd) {
                                *dst += gr * xv;
                            }
                        }
                    }
                    let wd = wt.data();
                    let gv = slot(&mut grads, *v, cols);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        for (dst, wv) in gv.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                            *dst += gr * wv;
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    for (dst, gv) in slot(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *dst -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    for ((dst, gv), bv) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(bd)
                    {
                        *dst += gv * bv;
                    }
                    for ((dst, gv), av) in slot(&mut grads, *b, g.len()).iter_mut().zip(&g).zip(ad)
                    {
                        *dst += gv * av;
                    }
                }
                Op::Sigmoid(a) => {
                    let dst = slot(&mut grads, *a, g.len());
                    for ((d, gv), y) in dst.iter_mut().zip(&g).zip(x) {
                        *d += gv * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let dst = slot(&mut grads, *a, g.len());
                    for ((d, gv), y) in dst.iter_mut().zip(&g).zip(x) {
                        *d += gv * (1.0 - y * y);
                    }
                }
                Op::Exp(a) => {
                    let dst = slot(&mut grads, *a, g.len());
                    for ((d, gv), y) in dst.iter_mut().zip(&g).zip(x) {
                        *d += gv * y;
                    }
                }
                Op::Log(a) => {
                    let ad = self.value(*a).data();
                    let dst = slot(&mut grads, *a, g.len());
                    for ((d, gv), u) in dst.iter_mut().zip(&g).zip(ad) {
                        *d += gv / u;
                    }
                }
                Op::Relu(a) => {
                    let ad = self.value(*a).data();
                    let dst = slot(&mut grads, *a, g.len());
                    for ((d, gv), u) in dst.iter_mut().zip(&g).zip(ad) {
                        if *u > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let ad = self.value(*a).data();
                    let dst = slot(&mut grads, *a, g.len());
                    for ((d, gv), u) in dst.iter_mut().zip(&g).zip(ad) {
                        if *u >= *lo && *u <= *hi {
                            *d += gv;
                        }
                    }
                }
                Op::Scale(a, factor) => {
                    for (d, gv) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += gv * factor;
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    slot(&mut grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::WindowMean(inputs) => {
                    let scaled: Vec<f64> = g.iter().map(|v| v / inputs.len() as f64).collect();
                    for id in inputs {
                        add_into(slot(&mut grads, *id, g.len()), &scaled);
                    }
                }
                Op::Concat(inputs) => {
                    let mut offset = 0;
                    for id in inputs {
                        let n = self.value(*id).len();
                        add_into(slot(&mut grads, *id, n), &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::HalfSqDist(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    let diff: Vec<f64> = ad.iter().zip(bd).map(|(p, q)| g[0] * (p - q)).collect();
                    add_into(slot(&mut grads, *a, diff.len()), &diff);
                    for (d, v) in slot(&mut grads, *b, diff.len()).iter_mut().zip(&diff) {
                        *d -= v;
                    }
                }
                Op::SoftmaxXent(logits, label) => {
                    let ld = self.value(*logits).data();
                    let m = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = ld.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let dst = slot(&mut grads, *logits, ld.len());
                    for (k, (d, e)) in dst.iter_mut().zip(&exps).enumerate() {
                        let target = if k == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (e / z - target);
                    }
                }
                Op::Map { input, derivative } => {
                    let ad = self.value(*input).data();
                    let dst = slot(&mut grads, *input, g.len());
                    for ((d, gv), u) in dst.iter_mut().zip(&g).zip(ad) {
                        *d += gv * derivative(*u);
                    }
                }
            }
        }

        for (name, &id) in &self.params {
            if !out.contains(name) {
                out.insert(name.clone(), Tensor::zeros(self.value(id).shape()));
            }
        }
        Ok(out)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_fixed_points() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0]));
        let s = g.sigmoid(z);
        let t = g.tanh(z);
        assert_eq!(g.value(s).data(), &[0.5]);
        assert_eq!(g.value(t).data(), &[0.0]);
    }

    #[test]
    fn sigmoid_extremes_do_not_overflow() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn identity_matvec() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::identity(3));
        let v = g.constant(Tensor::vector(vec![1.5, -2.0, 0.25]));
        let out = g.matvec(w, v).unwrap();
        assert_eq!(g.value(out).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "add", .. }));
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
        let m = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.matvec(m, b),
            Err(Error::Shape { op: "matvec", .. })
        ));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::vector(vec![3.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::vector(vec![2.0, 1.0]));
        let _p = g.param("p", &Tensor::vector(vec![5.0]));
        let e = g.exp(w);
        let loss = g.sum(e);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn window_mean_of_one_is_identity() {
        let mut g = Graph::new();
        let w = g.param("w", &Tensor::vector(vec![1.0, -4.0, 2.5]));
        let m = g.window_mean(&[w]).unwrap();
        assert_eq!(g.value(m), g.value(w));
        let c = g.constant(Tensor::vector(vec![0.3, 0.7, -1.1]));
        let prod = g.mul(m, c).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.3, 0.7, -1.1]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Numerical(_))));
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let mut g = Graph::new();
        let l = g.param("l", &Tensor::vector(vec![0.0; 4]));
        let loss = g.softmax_xent(l, 2).unwrap();
        assert!((g.scalar(loss) - 4f64.ln()).abs() < 1e-15);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("l").unwrap().data(), &[0.25, 0.25, -0.75, 0.25]);
    }
}
