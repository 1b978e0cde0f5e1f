use std::cell::{Ref, RefCell};

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
    pub(crate) grad: Option<Tensor<T>>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Single-use record of one forward pass.
///
/// Nodes are appended in execution order, so every node follows its inputs.
pub struct Tape<T> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    /// Drops every recorded node and makes the tape usable again.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    /// Records an input tensor. Panics if the tape was already consumed;
    /// use [`Tape::try_leaf`] to get an error instead.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.try_leaf(value, requires_grad)
            .expect("leaf recorded on a consumed tape")
    }

    pub fn try_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push_node(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    /// Gradient populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.inner.borrow().nodes[v.0].grad.clone()
    }

    pub fn take_grad(&self, v: Var) -> Option<Tensor<T>> {
        self.inner.borrow_mut().nodes[v.0].grad.take()
    }

    fn push_node(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Tape(
                "tape already consumed by backward; reset it before recording".into(),
            ));
        }
        inner.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(inner.nodes.len() - 1))
    }

    /// Records the result of an operation; it requires a gradient iff any
    /// input does.
    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let requires_grad = {
            let inner = self.inner.borrow();
            op.inputs().iter().any(|v| inner.nodes[v.0].requires_grad)
        };
        self.push_node(value, requires_grad, op)
    }

    #[cfg(test)]
    pub(crate) fn with_nodes<R>(&self, f: impl FnOnce(&[Node<T>]) -> R) -> R {
        f(&self.inner.borrow().nodes)
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// Nodes that require a gradient but do not influence `loss` receive a
    /// zero gradient.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        if inner.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        let loss_len = inner.nodes[loss.0].value.len();
        if loss_len != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[loss.0].value.shape()
            )));
        }
        inner.consumed = true;

        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            node.op.backward(&node.value, &g, nodes, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in inner.nodes.iter_mut().zip(grads) {
            if !node.requires_grad {
                continue;
            }
            let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
            node.grad = Some(Tensor {
                shape: node.value.shape().to_vec(),
                data,
            });
        }
        Ok(())
    }
}

/// Adds into the gradient buffer of `v` if it takes part in differentiation.
pub(crate) fn accumulate<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let n = node.value.len();
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
    f(buf);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(x: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![x.len()], x.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[0.5, -1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[1.0, 2.0]));
        let c = tape.constant(vec1(&[3.0]));
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[1.0]));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
        assert!(tape.try_leaf(vec1(&[1.0]), true).is_err());
        tape.reset();
        assert!(tape.is_empty());
        assert!(tape.try_leaf(vec1(&[1.0]), true).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
        // a rejected call does not consume the tape
        let s = tape.sum_all(x).unwrap();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn nodes_are_topologically_ordered() {
        let tape = Tape::new();
        let a = tape.param(vec1(&[1.0, 2.0]));
        let b = tape.relu(a).unwrap();
        let c = tape.add(a, b).unwrap();
        tape.with_nodes(|nodes| {
            for (i, n) in nodes.iter().enumerate() {
                for input in n.op.inputs() {
                    assert!(input.0 < i);
                }
            }
        });
        assert!(c.0 > b.0);
    }
}
