use super::ops;
use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Parameter,
    Input,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf { kind: LeafKind, name: String },
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, stride: usize, padding: usize },
    Relu(NodeId),
    Add(NodeId, NodeId),
    GlobalAvgPool(NodeId),
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    L2Normalize(NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf { .. } => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![input, weight, bias],
            Op::Relu(x) | Op::GlobalAvgPool(x) | Op::L2Normalize(x) | Op::Sum(x) => vec![x],
            Op::Add(a, b) | Op::Dot(a, b) => vec![a, b],
            Op::Linear { input, weight, bias } => vec![input, weight, bias],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor<T>>,
}

/// Reverse-mode computation graph over dense tensors.
///
/// Nodes are appended in topological order: every operand is created
/// before the node that uses it. Leaf values are bound at creation and can
/// be replaced with [`Graph::set_value`]; [`Graph::forward`] then evaluates
/// every interior node.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    loss: Option<NodeId>,
    evaluated: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            loss: None,
            evaluated: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor<T>>) -> NodeId {
        self.evaluated = self.evaluated && value.is_some();
        self.nodes.push(Node { op, shape, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Node<T>, AutodiffError> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub fn shape(&self, id: NodeId) -> Result<&[usize], AutodiffError> {
        Ok(&self.check(id)?.shape)
    }

    pub fn parameter(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        self.leaf(LeafKind::Parameter, name.into(), value)
    }

    pub fn input(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        self.leaf(LeafKind::Input, name.into(), value)
    }

    fn leaf(&mut self, kind: LeafKind, name: String, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Leaf { kind, name }, shape, Some(value))
    }

    /// Leaves of the given kind, with their names, in creation order.
    pub fn leaves(&self, kind: LeafKind) -> impl Iterator<Item = (&str, NodeId)> + '_ {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match &n.op {
            Op::Leaf { kind: k, name } if *k == kind => Some((name.as_str(), NodeId(i))),
            _ => None,
        })
    }

    pub fn find_leaf(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| matches!(&n.op, Op::Leaf { name: nm, .. } if nm == name)).map(NodeId)
    }

    /// Replaces a leaf's value. Interior values become stale until the next
    /// [`Graph::forward`].
    pub fn set_value(&mut self, id: NodeId, value: Tensor<T>) -> Result<(), AutodiffError> {
        let node = self.nodes.get_mut(id.0).ok_or(AutodiffError::UnknownNode(id.0))?;
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(AutodiffError::NotALeaf(id.0));
        }
        if node.shape != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                context: "set_value".into(),
                expected: node.shape.clone(),
                actual: value.shape().to_vec(),
            });
        }
        node.value = Some(value);
        self.evaluated = false;
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>, AutodiffError> {
        let node = self.check(id)?;
        if !self.evaluated && !matches!(node.op, Op::Leaf { .. }) {
            return Err(AutodiffError::GraphNotEvaluated);
        }
        node.value.as_ref().ok_or(AutodiffError::GraphNotEvaluated)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, AutodiffError> {
        let shape = ops::conv2d_shape(
            self.shape(input)?,
            self.shape(weight)?,
            self.shape(bias)?,
            stride,
            padding,
        )?;
        Ok(self.push(Op::Conv2d { input, weight, bias, stride, padding }, shape, None))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.shape(x)?.to_vec();
        Ok(self.push(Op::Relu(x), shape, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                context: "add".into(),
                expected: sa.to_vec(),
                actual: sb.to_vec(),
            });
        }
        let shape = sa.to_vec();
        Ok(self.push(Op::Add(a, b), shape, None))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x)?;
        if s.len() != 3 {
            return Err(AutodiffError::ShapeMismatch {
                context: "global_avg_pool expects (C, H, W)".into(),
                expected: vec![],
                actual: s.to_vec(),
            });
        }
        let shape = vec![s[0]];
        Ok(self.push(Op::GlobalAvgPool(x), shape, None))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (si, sw, sb) = (self.shape(input)?, self.shape(weight)?, self.shape(bias)?);
        if si.len() != 1 || sw.len() != 2 || sw[1] != si[0] || sb != [sw[0]] {
            return Err(AutodiffError::ShapeMismatch {
                context: format!("linear: input {si:?}, bias {sb:?}"),
                expected: vec![sb.first().copied().unwrap_or(0), si.first().copied().unwrap_or(0)],
                actual: sw.to_vec(),
            });
        }
        let shape = vec![sw[0]];
        Ok(self.push(Op::Linear { input, weight, bias }, shape, None))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x)?;
        if s.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                context: "l2_normalize expects a vector".into(),
                expected: vec![],
                actual: s.to_vec(),
            });
        }
        let shape = s.to_vec();
        Ok(self.push(Op::L2Normalize(x), shape, None))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.check(x)?;
        Ok(self.push(Op::Sum(x), vec![1], None))
    }

    /// Inner product of two same-shaped tensors, as a one-element tensor.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                context: "dot".into(),
                expected: sa.to_vec(),
                actual: sb.to_vec(),
            });
        }
        Ok(self.push(Op::Dot(a, b), vec![1], None))
    }

    /// Designates the scalar output that [`Graph::backward`] differentiates.
    pub fn set_loss(&mut self, id: NodeId) -> Result<(), AutodiffError> {
        let shape = self.shape(id)?;
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NotScalar(shape.to_vec()));
        }
        self.loss = Some(id);
        Ok(())
    }

    pub fn loss(&self) -> Option<NodeId> {
        self.loss
    }

    pub fn loss_value(&self) -> Result<T, AutodiffError> {
        let id = self.loss.ok_or(AutodiffError::NoLoss)?;
        Ok(self.value(id)?.data()[0])
    }

    /// Evaluates every interior node in creation order.
    pub fn forward(&mut self) -> Result<(), AutodiffError> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let out = {
                let v = |id: NodeId| -> &Tensor<T> { self.nodes[id.0].value.as_ref().expect("operand evaluated") };
                match op {
                    Op::Leaf { .. } => continue,
                    Op::Conv2d { input, weight, bias, stride, padding } => {
                        ops::conv2d_forward(v(input), v(weight), v(bias), stride, padding)
                    }
                    Op::Relu(x) => ops::relu_forward(v(x)),
                    Op::Add(a, b) => ops::add_forward(v(a), v(b)),
                    Op::GlobalAvgPool(x) => ops::global_avg_pool_forward(v(x)),
                    Op::Linear { input, weight, bias } => ops::linear_forward(v(input), v(weight), v(bias)),
                    Op::L2Normalize(x) => ops::l2_normalize_forward(v(x)),
                    Op::Sum(x) => Tensor::scalar(v(x).data().iter().copied().sum()),
                    Op::Dot(a, b) => Tensor::scalar(ops::dot(v(a).data(), v(b).data())),
                }
            };
            if !out.is_finite() {
                return Err(AutodiffError::NonFinite(i));
            }
            self.nodes[i].value = Some(out);
        }
        self.evaluated = true;
        Ok(())
    }

    /// Gradients of the designated loss with respect to every node that
    /// feeds it.
    pub fn backward(&self) -> Result<Gradients<T>, AutodiffError> {
        let loss = self.loss.ok_or(AutodiffError::NoLoss)?;
        let shape = self.shape(loss)?.to_vec();
        let mut seed = Tensor::zeros(&shape);
        seed.data_mut()[0] = T::one();
        self.backward_from(loss, seed)
    }

    /// Vector-Jacobian product: propagates `seed` as the adjoint of `output`.
    pub fn backward_from(&self, output: NodeId, seed: Tensor<T>) -> Result<Gradients<T>, AutodiffError> {
        if !self.evaluated {
            return Err(AutodiffError::GraphNotEvaluated);
        }
        let out_shape = self.shape(output)?;
        if out_shape != seed.shape() {
            return Err(AutodiffError::ShapeMismatch {
                context: "backward seed".into(),
                expected: out_shape.to_vec(),
                actual: seed.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let v = |id: NodeId| -> &Tensor<T> { self.nodes[id.0].value.as_ref().expect("evaluated") };
            let contributions: Vec<(NodeId, Tensor<T>)> = match node.op {
                Op::Leaf { .. } => unreachable!(),
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    let (gx, gw, gb) = ops::conv2d_backward(v(input), v(weight), &g, stride, padding);
                    vec![(input, gx), (weight, gw), (bias, gb)]
                }
                Op::Relu(x) => vec![(x, ops::relu_backward(v(x), &g))],
                Op::Add(a, b) => vec![(a, g.clone()), (b, g)],
                Op::GlobalAvgPool(x) => vec![(x, ops::global_avg_pool_backward(v(x).shape(), &g))],
                Op::Linear { input, weight, bias } => {
                    let (gx, gw) = ops::linear_backward(v(input), v(weight), &g);
                    vec![(input, gx), (weight, gw), (bias, g)]
                }
                Op::L2Normalize(x) => vec![(x, ops::l2_normalize_backward(v(x), node.value.as_ref().expect("evaluated"), &g))],
                Op::Sum(x) => {
                    let s = v(x).shape();
                    let mut t = Tensor::zeros(s);
                    t.data_mut().fill(g.data()[0]);
                    vec![(x, t)]
                }
                Op::Dot(a, b) => {
                    let s = g.data()[0];
                    let scale = |t: &Tensor<T>| {
                        let mut o = t.clone();
                        o.data_mut().iter_mut().for_each(|e| *e = *e * s);
                        o
                    };
                    vec![(a, scale(v(b))), (b, scale(v(a)))]
                }
            };
            for (id, t) in contributions {
                match &mut adj[id.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        // Only leaves keep their adjoints; interior ones were consumed above.
        Ok(Gradients { grads: adj })
    }

    /// Sign pattern (`> 0`) of every relu operand, in node order.
    pub(crate) fn relu_pattern(&self) -> Result<Vec<bool>, AutodiffError> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.value(x)?.data().iter().map(|v| *v > T::zero()));
            }
        }
        Ok(out)
    }

    pub(crate) fn operands(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.operands()
    }
}

/// Adjoints of the leaves reached by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the node does not influence the differentiated output.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Gradient for `id`, or zeros of `shape` when it is unreachable.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
