//! The tape: an append-only arena of computed values and their backward rules.
//!
//! Node ids are assigned in execution order, so reverse id order is a
//! reverse topological order of the computation. Each node keeps its value
//! behind an `Rc` so backward closures can hold on to the inputs they need
//! without copying.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Computes input gradients from the output gradient. The mask says which
/// inputs need one; entries for the others may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Element> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T: Element> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> core::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_rc(Rc::new(value), requires_grad)
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, inputs: Vec::new(), backward: None });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A leaf that receives a gradient.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an operation. The backward rule is dropped when no input
    /// requires a gradient.
    pub(crate) fn push_op(&self, value: Tensor<T>, inputs: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| {
            assert!(core::ptr::eq(v.graph, self), "Var from a different graph");
            nodes[v.id].requires_grad
        });
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            inputs: if requires_grad { inputs.iter().map(|v| v.id).collect() } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients of every reachable leaf with `requires_grad` are returned;
    /// when a value feeds several consumers its gradient is the sum of their
    /// contributions. Intermediate gradients are released as soon as they
    /// have been propagated.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        assert!(core::ptr::eq(loss.graph, self), "loss from a different graph");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        }
        for id in (0..=loss.id).rev() {
            let Some(node_grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                Some(backward) => {
                    let mask: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                    let input_grads = backward(&node_grad, &mask);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for ((&input, grad), needed) in node.inputs.iter().zip(input_grads).zip(mask) {
                        let Some(grad) = grad else { continue };
                        if !needed {
                            continue;
                        }
                        debug_assert_eq!(grad.shape(), nodes[input].value.shape(), "gradient shape");
                        match &mut grads[input] {
                            Some(acc) => acc.add_assign(&grad),
                            slot @ None => *slot = Some(grad),
                        }
                    }
                }
                None => grads[id] = Some(node_grad),
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// A constant copy of this value, cut off from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.leaf_rc(self.value(), false)
    }
}
