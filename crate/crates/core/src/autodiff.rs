//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only list of nodes. Every node's inputs precede it,
//! so the insertion order is a valid evaluation order and reversing it is a
//! valid backward order. Values are computed eagerly when a node is added.
//!
//! The engine is first-order only. Losses that depend on input gradients of
//! the model (the sensitivity loss) build those gradients explicitly from
//! forward ops such as [`Op::EluPrime`], so an ordinary backward sweep through
//! them yields the mixed second derivatives with respect to parameters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds. Elementwise binary ops require equal shapes; the only
/// broadcast is [`Op::BroadcastAddRow`], which adds a `1 x c` row to every row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Constant,
    Parameter,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Neg,
    /// `z` for `z > 0`, `e^z - 1` otherwise.
    Elu,
    /// Derivative of [`Op::Elu`]: `1` for `z > 0`, `e^z` otherwise.
    EluPrime,
    Relu,
    Abs,
    Square,
    Sqrt,
    /// Sum of all entries, giving a 1x1 node.
    Sum,
    /// Mean of all entries, giving a 1x1 node.
    Mean,
    BroadcastAddRow,
    Transpose,
    /// Multiply by a fixed constant.
    Scale(f64),
    /// Add a fixed constant to every entry.
    Shift(f64),
    /// `max(x, floor)` elementwise.
    ClampMin(f64),
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Neg => "neg",
            Op::Elu => "elu",
            Op::EluPrime => "elu_prime",
            Op::Relu => "relu",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::BroadcastAddRow => "broadcast_add_row",
            Op::Transpose => "transpose",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::ClampMin(_) => "clamp_min",
        }
    }

    fn arity(self) -> usize {
        match self {
            Op::Constant | Op::Parameter => 0,
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Div | Op::BroadcastAddRow => 2,
            _ => 1,
        }
    }
}

pub fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

pub fn elu_prime(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

impl Node {
    pub fn op(&self) -> Op {
        self.op
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn is_parameter(&self) -> bool {
        self.op == Op::Parameter
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of the last backward root with respect to `id`.
    /// Nodes the root does not depend on (and constants) report zeros.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            requires_grad,
        });
        id
    }

    fn check_finite(t: &Tensor) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput("leaf tensor has non-finite entries".into()))
        }
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        Self::check_finite(&t)?;
        Ok(self.push(Op::Constant, Vec::new(), t, false))
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, t: Tensor) -> Result<NodeId> {
        Self::check_finite(&t)?;
        Ok(self.push(Op::Parameter, Vec::new(), t, true))
    }

    /// Adds a node computing `op` over `args` and evaluates it immediately.
    pub fn apply(&mut self, op: Op, args: &[NodeId]) -> Result<NodeId> {
        let name = op.name();
        if op.arity() == 0 {
            return Err(Error::Contract(format!("{name} is a leaf, use constant/parameter")));
        }
        if args.len() != op.arity() {
            return Err(Error::Contract(format!(
                "{name} takes {} inputs, got {}",
                op.arity(),
                args.len()
            )));
        }
        if let Some(bad) = args.iter().find(|a| a.0 >= self.nodes.len()) {
            return Err(Error::Contract(format!("unknown node id {}", bad.0)));
        }
        let a = &self.nodes[args[0].0].value;
        let b = args.get(1).map(|id| &self.nodes[id.0].value);
        let value = match (op, b) {
            (Op::MatMul, Some(b)) => {
                if a.cols() != b.rows() {
                    return Err(Error::shape(name, format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                a.gemm(false, b, false)
            }
            (Op::BroadcastAddRow, Some(b)) => {
                if b.rows() != 1 || b.cols() != a.cols() {
                    return Err(Error::shape(
                        name,
                        format!("row {:?} does not fit {:?}", b.shape(), a.shape()),
                    ));
                }
                let cols = a.cols();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + b.data()[i % cols])
                    .collect();
                Tensor::from_raw(a.rows(), cols, data)
            }
            (_, Some(b)) => {
                if a.shape() != b.shape() {
                    return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                match op {
                    Op::Add => a.zip_map(b, |x, y| x + y),
                    Op::Sub => a.zip_map(b, |x, y| x - y),
                    Op::Mul => a.zip_map(b, |x, y| x * y),
                    Op::Div => {
                        if b.data().iter().any(|&d| d == 0.0) {
                            return Err(Error::domain(name, "division by zero"));
                        }
                        a.zip_map(b, |x, y| x / y)
                    }
                    _ => unreachable!("binary ops handled above"),
                }
            }
            (_, None) => match op {
                Op::Exp => a.map(f64::exp),
                Op::Log => {
                    if a.data().iter().any(|&v| v <= 0.0) {
                        return Err(Error::domain(name, "log of a non-positive value"));
                    }
                    a.map(f64::ln)
                }
                Op::Neg => a.map(|v| -v),
                Op::Elu => a.map(elu),
                Op::EluPrime => a.map(elu_prime),
                Op::Relu => a.map(|v| v.max(0.0)),
                Op::Abs => a.map(f64::abs),
                Op::Square => a.map(|v| v * v),
                Op::Sqrt => {
                    if a.data().iter().any(|&v| v < 0.0) {
                        return Err(Error::domain(name, "sqrt of a negative value"));
                    }
                    a.map(f64::sqrt)
                }
                Op::Sum => Tensor::scalar(a.sum()),
                Op::Mean => {
                    if a.is_empty() {
                        return Err(Error::shape(name, "mean of an empty tensor"));
                    }
                    Tensor::scalar(a.sum() / a.len() as f64)
                }
                Op::Transpose => a.transpose(),
                Op::Scale(c) => a.map(|v| v * c),
                Op::Shift(c) => a.map(|v| v + c),
                Op::ClampMin(f) => a.map(|v| v.max(f)),
                _ => unreachable!("unary ops only"),
            },
        };
        if !value.is_finite() {
            return Err(Error::domain(name, "result is not finite"));
        }
        let requires_grad = args.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(op, args.to_vec(), value, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[a])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Neg, &[a])
    }

    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Elu, &[a])
    }

    pub fn elu_prime(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::EluPrime, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Square, &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sqrt, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[a])
    }

    pub fn broadcast_add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.apply(Op::BroadcastAddRow, &[a, row])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::Shift(c), &[a])
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.apply(Op::ClampMin(floor), &[a])
    }

    /// Reverse sweep from a scalar root. Gradients of earlier sweeps are
    /// discarded first, so repeated calls do not accumulate across roots.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("unknown node id {}", root.0)));
        }
        if self.nodes[root.0].value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be 1x1, got {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                self.nodes[idx].grad = Some(upstream);
                continue;
            }
            let contributions = self.local_grads(idx, &upstream);
            self.nodes[idx].grad = Some(upstream);
            for (input, g) in contributions {
                let slot = &mut self.nodes[input.0].grad;
                match slot {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each input that needs a gradient.
    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[idx];
        let wants = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        let out = &node.value;
        let mut grads = Vec::with_capacity(node.inputs.len());
        let mut emit = |i: usize, t: Tensor| grads.push((node.inputs[i], t));

        match node.op {
            Op::Constant | Op::Parameter => {}
            Op::MatMul => {
                if wants(0) {
                    emit(0, g.gemm(false, input(1), true));
                }
                if wants(1) {
                    emit(1, input(0).gemm(true, g, false));
                }
            }
            Op::Add => {
                for i in 0..2 {
                    if wants(i) {
                        emit(i, g.clone());
                    }
                }
            }
            Op::Sub => {
                if wants(0) {
                    emit(0, g.clone());
                }
                if wants(1) {
                    emit(1, g.map(|v| -v));
                }
            }
            Op::Mul => {
                if wants(0) {
                    emit(0, g.zip_map(input(1), |u, b| u * b));
                }
                if wants(1) {
                    emit(1, g.zip_map(input(0), |u, a| u * a));
                }
            }
            Op::Div => {
                let b = input(1);
                if wants(0) {
                    emit(0, g.zip_map(b, |u, d| u / d));
                }
                if wants(1) {
                    // d(a/b)/db = -out / b
                    let q = out.zip_map(b, |o, d| -o / d);
                    emit(1, g.zip_map(&q, |u, v| u * v));
                }
            }
            Op::Exp => emit(0, g.zip_map(out, |u, o| u * o)),
            Op::Log => emit(0, g.zip_map(input(0), |u, x| u / x)),
            Op::Neg => emit(0, g.map(|v| -v)),
            Op::Elu => emit(0, g.zip_map(input(0), |u, z| u * elu_prime(z))),
            Op::EluPrime => emit(
                0,
                g.zip_map(input(0), |u, z| if z > 0.0 { 0.0 } else { u * z.exp() }),
            ),
            Op::Relu => emit(0, g.zip_map(input(0), |u, z| if z > 0.0 { u } else { 0.0 })),
            Op::Abs => emit(0, g.zip_map(input(0), |u, z| u * sign(z))),
            Op::Square => emit(0, g.zip_map(input(0), |u, z| 2.0 * u * z)),
            Op::Sqrt => emit(
                0,
                g.zip_map(out, |u, o| if o > 0.0 { 0.5 * u / o } else { 0.0 }),
            ),
            Op::Sum => {
                let a = input(0);
                emit(0, Tensor::filled(a.rows(), a.cols(), g.item()));
            }
            Op::Mean => {
                let a = input(0);
                emit(0, Tensor::filled(a.rows(), a.cols(), g.item() / a.len() as f64));
            }
            Op::BroadcastAddRow => {
                if wants(0) {
                    emit(0, g.clone());
                }
                if wants(1) {
                    emit(1, g.column_sums());
                }
            }
            Op::Transpose => emit(0, g.transpose()),
            Op::Scale(c) => emit(0, g.map(|v| v * c)),
            Op::Shift(_) => emit(0, g.clone()),
            Op::ClampMin(f) => emit(0, g.zip_map(input(0), |u, x| if x > f { u } else { 0.0 })),
        }
        grads
    }
}

fn sign(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn leaves() {
        let mut g = Graph::new();
        let c = g.constant(t(1, 2, &[1.0, 2.0])).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);
        assert_eq!(g.grad(c).data(), &[0.0, 0.0]);
        let p = g.parameter(Tensor::identity(2)).unwrap();
        assert!(g.node(p).is_parameter());
        assert!(!g.node(c).is_parameter());
        assert!(matches!(
            g.constant(Tensor::from_raw(1, 1, vec![f64::NAN])),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn elu_values() {
        assert!((elu(-5.0) - (-0.993_262_053_000_914_7)).abs() < 1e-12);
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu_prime(0.0), 1.0);
        assert_eq!(elu(2.5), 2.5);
        assert!((elu_prime(-1.0) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn shapes_and_domains() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(1, 3)).unwrap();
        let b = g.constant(Tensor::zeros(3, 2)).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), (1, 2));
        assert!(matches!(g.matmul(b, b), Err(Error::Shape { .. })));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(g.log(a), Err(Error::Domain { .. })));
        assert!(matches!(g.div(a, a), Err(Error::Domain { .. })));
        let row = g.constant(Tensor::zeros(1, 2)).unwrap();
        assert!(matches!(g.broadcast_add_row(a, row), Err(Error::Shape { .. })));
        assert!(matches!(g.apply(Op::Exp, &[a, b]), Err(Error::Contract(_))));
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let p = g.parameter(t(1, 2, &[1.0, 2.0])).unwrap();
        let sq = g.square(p).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_gradient() {
        let mut g = Graph::new();
        let p = g.parameter(t(1, 4, &[3.0, -1.0, 0.5, 8.0])).unwrap();
        let m = g.mean(p).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(p).data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let p = g.parameter(t(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let p = g.parameter(t(1, 2, &[1.0, 2.0])).unwrap();
        let c = g.constant(t(1, 2, &[3.0, 4.0])).unwrap();
        let m = g.mul(p, c).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).data(), &[3.0, 4.0]);
        assert_eq!(g.grad(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // L = sum(p * p + p) -> dL/dp = 2p + 1
        let mut g = Graph::new();
        let p = g.parameter(t(1, 3, &[1.0, -2.0, 0.5])).unwrap();
        let pp = g.mul(p, p).unwrap();
        let q = g.add(pp, p).unwrap();
        let s = g.sum(q).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn broadcast_row_gradient_sums_columns() {
        let mut g = Graph::new();
        let a = g.parameter(Tensor::zeros(3, 2)).unwrap();
        let r = g.parameter(t(1, 2, &[1.0, 2.0])).unwrap();
        let b = g.broadcast_add_row(a, r).unwrap();
        assert_eq!(g.value(b).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let s = g.sum(b).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(r).data(), &[3.0, 3.0]);
        assert_eq!(g.grad(a).data(), &[1.0; 6]);
    }

    #[test]
    fn elu_prime_second_derivative() {
        let mut g = Graph::new();
        let p = g.parameter(t(1, 3, &[-1.0, 0.0, 2.0])).unwrap();
        let d = g.elu_prime(p).unwrap();
        let s = g.sum(d).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(p);
        assert!((grad.data()[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(grad.data()[1], 1.0);
        assert_eq!(grad.data()[2], 0.0);
    }
}
