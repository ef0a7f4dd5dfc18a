use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::LinearOp;

use super::{Op, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Wengert list of recorded operations.
///
/// Values are kept for every node; backward never recomputes a forward value.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every differentiable leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.by_leaf.get(&leaf)
    }

    /// Removes and returns the gradient of `leaf`.
    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.by_leaf.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_leaf.iter().map(|(k, v)| (*k, v))
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

    /// Differentiable input. Values are checked for finiteness.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_input(Op::Leaf, value, true)
    }

    /// Input that is treated as a constant by [`Tape::backward`].
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_input(Op::Constant, value, false)
    }

    fn push_input(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{} input", op.name())));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(id.0))
    }

    pub fn op(&self, id: NodeId) -> Result<&Op> {
        self.nodes
            .get(id.0)
            .map(|n| &n.op)
            .ok_or(Error::UnknownNode(id.0))
    }

    /// Records `op` applied to already-recorded `inputs` and returns the new node.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(id.0));
            }
        }
        let value = {
            let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            op.forward(&values)?
        };
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
        });
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, alpha: f64) -> Result<NodeId> {
        self.record(Op::Scale(alpha), &[x])
    }

    pub fn scale_by(&mut self, factor: NodeId, x: NodeId) -> Result<NodeId> {
        self.record(Op::ScaleBy, &[factor, x])
    }

    pub fn matvec(&mut self, op: &LinearOp, x: NodeId) -> Result<NodeId> {
        self.record(Op::MatVec(op.clone()), &[x])
    }

    pub fn correlate1d(&mut self, x: NodeId, kernel: Arc<[f64]>) -> Result<NodeId> {
        self.record(Op::Correlate1d(kernel), &[x])
    }

    pub fn correlate2d(&mut self, x: NodeId, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        match bias {
            Some(b) => self.record(Op::Correlate2d, &[x, kernel, b]),
            None => self.record(Op::Correlate2d, &[x, kernel]),
        }
    }

    pub fn gradient2d(&mut self, u: NodeId) -> Result<NodeId> {
        self.record(Op::Gradient2d, &[u])
    }

    pub fn gradient2d_adjoint(&mut self, p: NodeId) -> Result<NodeId> {
        self.record(Op::Gradient2dAdjoint, &[p])
    }

    pub fn normalize_field(&mut self, p: NodeId, eps: f64) -> Result<NodeId> {
        self.record(Op::NormalizeField(eps), &[p])
    }

    pub fn smoothed_tv(&mut self, u: NodeId, eps: f64) -> Result<NodeId> {
        self.record(Op::SmoothedTv(eps), &[u])
    }

    /// Gradient field of the smoothed TV functional, `D^T (Du / sqrt(|Du|^2 + eps^2))`,
    /// composed from primitive ops so that it can itself be differentiated.
    pub fn smoothed_tv_gradient(&mut self, u: NodeId, eps: f64) -> Result<NodeId> {
        let du = self.gradient2d(u)?;
        let n = self.normalize_field(du, eps)?;
        self.gradient2d_adjoint(n)
    }

    pub fn squared_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::SquaredNorm, &[x])
    }

    pub fn norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Norm, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sum, &[x])
    }

    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::MeanPool, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sigmoid, &[x])
    }

    pub fn binary_cross_entropy(&mut self, p: NodeId, target: f64) -> Result<NodeId> {
        self.record(Op::BinaryCrossEntropy(target), &[p])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(Op::Reshape(shape.to_vec()), &[x])
    }

    /// Reverse sweep from a scalar `output`. Every differentiable leaf gets an
    /// entry, zero-filled when it does not influence the output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.nodes.get(output.0).ok_or(Error::UnknownNode(output.0))?;
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adjoints[output.0] = Some(vec![1.0]);
        let mut by_leaf = BTreeMap::new();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                let grad = adjoints[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                by_leaf.insert(NodeId(idx), Tensor::raw(node.value.shape().to_vec(), grad));
                continue;
            }
            let Some(upstream) = adjoints[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].requires_grad)
                .collect();
            let contributions = node.op.backward(&inputs, &node.value, &upstream, &needs);
            for (id, contrib) in node.inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[id.0].requires_grad {
                    continue;
                }
                match &mut adjoints[id.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        // Leaves recorded after the output cannot influence it.
        for (idx, node) in self.nodes.iter().enumerate().skip(output.0 + 1) {
            if matches!(node.op, Op::Leaf) {
                by_leaf.insert(NodeId(idx), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_leaf })
    }
}
