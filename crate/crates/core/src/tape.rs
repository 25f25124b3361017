//! Reverse-mode differentiation over an explicitly recorded operation graph.
//!
//! A [`Tape`] is built fresh for every evaluation. Each recorded node keeps
//! its value, the handles of its inputs and a [`VjpRule`] that maps the
//! output cotangent to input cotangents. Nodes are appended in evaluation
//! order, so reverse index order is a valid topological order and the graph
//! is acyclic by construction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one operation.
pub trait VjpRule {
    fn name(&self) -> &'static str;

    /// Returns one cotangent per input; entries whose `needs` flag is false
    /// may be `None`.
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    parents: Vec<Var>,
    rule: Option<Box<dyn VjpRule>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the result of an operation.
    pub fn record(&mut self, value: Tensor, parents: &[Var], rule: impl VjpRule + 'static) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, parents.to_vec(), Some(Box::new(rule)), requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        rule: Option<Box<dyn VjpRule>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            parents,
            rule,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a single-element root with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::InvalidShape {
                shape,
                reason: "backward() needs a single-element root; use backward_with".into(),
            });
        }
        self.backward_with(root, Tensor::full(&shape, 1.0)?)
    }

    /// Backpropagates an arbitrary cotangent `seed` from `root`.
    ///
    /// Gradients accumulate into any gradients left by earlier calls.
    pub fn backward_with(&mut self, root: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.shape(root) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.shape(root).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut pending: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = pending[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(rule) = &node.rule {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
                let grads = rule.vjp(&inputs, &node.value, &g, &needs);
                debug_assert_eq!(grads.len(), node.parents.len(), "{}", rule.name());
                for ((parent, pg), need) in node.parents.iter().zip(grads).zip(&needs) {
                    let (Some(pg), true) = (pg, *need) else { continue };
                    debug_assert_eq!(pg.shape(), self.nodes[parent.0].value.shape(), "{}", rule.name());
                    match &mut pending[parent.0] {
                        Some(acc) => acc.accumulate(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.accumulate(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Gradient of `v`, or zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(self.value(v)))
    }
}
