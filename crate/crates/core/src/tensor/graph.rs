use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Index of a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    /// Leaf that never receives a gradient.
    Constant,
    /// Leaf whose gradient is collected by `backward`.
    Parameter,
    /// Output of a recorded primitive.
    Computed,
}

/// Vector-Jacobian product of one recorded primitive.
///
/// `inputs` are the parent values in the order they were recorded, `output`
/// is the value this primitive produced and `grad` the upstream gradient of
/// the same shape. One entry per parent is returned; `None` means the
/// primitive contributes nothing to that parent.
pub trait Backward {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    op: Option<Box<dyn Backward>>,
    kind: NodeKind,
    requires_grad: bool,
}

/// Append-only tape. Parents always precede children.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Square,
    AbsDiff,
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

    fn push_leaf(&mut self, value: Tensor, kind: NodeKind) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad: kind == NodeKind::Parameter,
            kind,
        });
        id
    }

    /// Leaf holding `value` that takes part in evaluation only.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, NodeKind::Constant)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, NodeKind::Parameter)
    }

    pub fn constant(&mut self, shape: Shape, fill: f64) -> NodeId {
        self.input(Tensor::full(shape, fill))
    }

    /// Appends the result of a primitive. The node requires a gradient iff
    /// one of its parents does.
    pub fn record(&mut self, value: Tensor, parents: Vec<NodeId>, op: Box<dyn Backward>) -> NodeId {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents,
            op: Some(op),
            kind: NodeKind::Computed,
            requires_grad,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn kind(&self, id: NodeId) -> NodeKind {
        self.nodes[id.0].kind
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient populated by the last backward pass, if the node was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a node, zero-filled when the loss does not depend on it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(id).clone()))
    }

    /// Reverse sweep from a scalar loss. Gradients of earlier backward calls
    /// are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let Graph { nodes, grads } = self;
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("node {} is not in this graph", loss.0)))?;
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                root.value.shape()
            )));
        }
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(root.value.shape().clone(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[i].as_ref() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &nodes[p.0].value).collect();
            let contribs = op.backward(&inputs, &node.value, upstream);
            debug_assert_eq!(contribs.len(), node.parents.len(), "{}", op.name());
            for (parent, contrib) in node.parents.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                if !nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(contrib.shape(), nodes[parent.0].value.shape(), "{}", op.name());
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: operand shapes {} and {} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        match (kind, b) {
            (ElementwiseKind::Square, None) => {
                let value = self.value(a).map(|v| v * v);
                Ok(self.record(value, vec![a], Box::new(SquareOp)))
            }
            (ElementwiseKind::Square, Some(_)) => Err(Error::Contract("square takes one operand".into())),
            (_, None) => Err(Error::Contract(format!("{kind:?} takes two operands"))),
            (_, Some(b)) => {
                self.same_shape(a, b, &format!("{kind:?}"))?;
                let f: fn(f64, f64) -> f64 = match kind {
                    ElementwiseKind::Add => |x, y| x + y,
                    ElementwiseKind::Sub => |x, y| x - y,
                    ElementwiseKind::Mul => |x, y| x * y,
                    ElementwiseKind::AbsDiff => |x, y| (x - y).abs(),
                    ElementwiseKind::Square => unreachable!(),
                };
                let value = zip_with(self.value(a), self.value(b), f);
                Ok(self.record(value, vec![a, b], Box::new(BinaryOp(kind))))
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseKind::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseKind::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseKind::Mul, a, Some(b))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseKind::Square, a, None)
    }

    pub fn abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(ElementwiseKind::AbsDiff, a, Some(b))
    }

    /// Elementwise quotient. The divisor must be nonzero everywhere.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let value = zip_with(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.record(value, vec![a, b], Box::new(DivOp)))
    }

    /// `k * a`.
    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).map(|v| k * v);
        self.record(value, vec![a], Box::new(ScaleOp(k)))
    }

    /// `a + k`.
    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).map(|v| v + k);
        self.record(value, vec![a], Box::new(AddScalarOp))
    }

    /// Sum of all elements, accumulated in index order.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s), vec![a], Box::new(SumOp { scale: 1.0 }))
    }

    /// Mean of all elements, accumulated in index order.
    pub fn reduce_mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s / n), vec![a], Box::new(SumOp { scale: 1.0 / n }))
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().clone(), data).expect("operands share a shape")
}

struct BinaryOp(ElementwiseKind);

impl Backward for BinaryOp {
    fn name(&self) -> &'static str {
        "elementwise"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        match self.0 {
            ElementwiseKind::Add => vec![Some(grad.clone()), Some(grad.clone())],
            ElementwiseKind::Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
            ElementwiseKind::Mul => vec![
                Some(zip_with(grad, b, |g, y| g * y)),
                Some(zip_with(grad, a, |g, x| g * x)),
            ],
            ElementwiseKind::AbsDiff => {
                let sign = zip_with(a, b, |x, y| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let ga = zip_with(grad, &sign, |g, s| g * s);
                let gb = ga.map(|v| -v);
                vec![Some(ga), Some(gb)]
            }
            ElementwiseKind::Square => unreachable!(),
        }
    }
}

struct SquareOp;

impl Backward for SquareOp {
    fn name(&self) -> &'static str {
        "square"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(zip_with(grad, inputs[0], |g, x| 2.0 * x * g))]
    }
}

struct DivOp;

impl Backward for DivOp {
    fn name(&self) -> &'static str {
        "div"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let b = inputs[1];
        let ga = zip_with(grad, b, |g, y| g / y);
        let gb_num = zip_with(grad, output, |g, q| -g * q);
        let gb = zip_with(&gb_num, b, |v, y| v / y);
        vec![Some(ga), Some(gb)]
    }
}

struct ScaleOp(f64);

impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let k = self.0;
        vec![Some(grad.map(|g| k * g))]
    }
}

struct AddScalarOp;

impl Backward for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone())]
    }
}

struct SumOp {
    scale: f64,
}

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data()[0] * self.scale;
        vec![Some(Tensor::full(inputs[0].shape().clone(), g))]
    }
}
