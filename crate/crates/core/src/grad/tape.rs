use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may read.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// d(loss)/d(output), laid out like `output`.
    pub grad: &'a [T],
    /// Whether each input wants a gradient; rules may skip work for `false`.
    pub needs: Vec<bool>,
}

/// Gradient contribution per input, `None` when the input needs none.
pub type Grads<T> = Vec<Option<Vec<T>>>;

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Grads<T>>;

enum Kind<T> {
    Leaf {
        grad: Option<Vec<T>>,
    },
    Op {
        name: &'static str,
        inputs: Vec<Var>,
        backward: Option<BackwardFn<T>>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    kind: Kind<T>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order of the DAG.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    debug: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            debug: false,
        }
    }

    /// Tape that checks every recorded value for NaN/Inf and rejects division
    /// by exact zero.
    pub fn debug() -> Self {
        Self {
            nodes: Vec::new(),
            debug: true,
        }
    }

    pub fn is_debug(&self) -> bool {
        self.debug
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node, keeping the debug flag.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn leaf(&mut self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![T::zero(); value.numel()]);
        self.nodes.push(Node {
            value,
            requires_grad,
            kind: Kind::Leaf { grad },
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Rc::new(value), true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Rc::new(value), false)
    }

    /// Constant leaf sharing storage with the caller (e.g. frozen weights).
    pub fn constant_shared(&mut self, value: Rc<Tensor<T>>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a parameter leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].kind {
            Kind::Leaf { grad } => grad.as_deref(),
            Kind::Op { .. } => None,
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Kind::Leaf { grad: Some(g) } = &mut node.kind {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    /// Records an op output. The backward rule is kept only when some input
    /// requires a gradient.
    pub fn push<F>(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: F,
    ) -> Result<Var>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Grads<T> + 'static,
    {
        if self.debug && !value.all_finite() {
            let idx = value
                .data()
                .iter()
                .position(|v| !v.is_finite())
                .unwrap_or(0);
            return Err(Error::NonFinite {
                op: name,
                term: "output".into(),
                location: format!("flat index {idx} of shape {:?}", value.shape()),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            kind: Kind::Op {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Name of the op that produced `v` (`"leaf"` for leaves).
    pub fn op_name(&self, v: Var) -> &'static str {
        match &self.nodes[v.0].kind {
            Kind::Leaf { .. } => "leaf",
            Kind::Op { name, .. } => name,
        }
    }

    /// Accumulates d(loss)/d(leaf) into every parameter leaf reachable from
    /// `loss`. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape("backward", "loss", "a scalar", &shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::invalid(
                "backward",
                "loss does not depend on any parameter",
            ));
        }
        let mut pending: Vec<Option<Vec<T>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            if let Kind::Leaf { grad } = &mut self.nodes[i].kind {
                if let Some(acc) = grad {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                continue;
            }
            let node = &self.nodes[i];
            let Kind::Op {
                inputs, backward, ..
            } = &node.kind
            else {
                unreachable!("leaves handled above")
            };
            let Some(rule) = backward else { continue };
            let ctx = BackwardCtx {
                inputs: inputs.iter().map(|v| &*self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: &g,
                needs: inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect(),
            };
            let grads = rule(&ctx);
            let contributions: Vec<_> = inputs.iter().copied().zip(grads).collect();
            for (input, contrib) in contributions {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(contrib.len(), self.nodes[input.0].value.numel());
                match &mut pending[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&contrib) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn constant_only_graph_keeps_no_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2], 1.0));
        let y = tape.sum(x).unwrap();
        assert!(!tape.requires_grad(y));
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[4], 2.0));
        let y = tape.sum(x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
        tape.zero_grads();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 4]);
    }
}
