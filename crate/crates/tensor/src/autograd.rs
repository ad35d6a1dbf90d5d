//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] owns its value and, when any input requires a gradient, a
//! backward closure plus handles to its parents. Graphs are reference
//! counted, so intermediates of gradient-free computations are released as
//! soon as the last handle drops.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::float::Float;
use crate::tensor::Tensor;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Backward closure: given the output gradient, the output value and the
/// parents, return one optional gradient per parent (in order).
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Differentiable handle to a tensor value.
pub struct Var<T: Float> {
    node: Rc<Node<T>>,
}

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.node.id)
            .field("shape", &self.node.value.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<T: Float> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, parents: Vec<Var<T>>, backward: Option<BackwardFn<T>>) -> Self {
        Self {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, Vec::new(), None)
    }

    /// A leaf that accumulates a gradient (a trainable parameter).
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(value, true, Vec::new(), None)
    }

    /// Result of an operation. The graph edge is only recorded when at least
    /// one parent requires a gradient.
    pub fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>, &Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Self::make(value, true, parents, Some(Box::new(backward)))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.node.value.clone())
    }

    /// Back-propagates from this (scalar) variable, seeding with ones.
    pub fn backward(&self) -> Gradients<T> {
        self.backward_with(Tensor::ones(self.shape().to_vec()))
    }

    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        let mut leaves = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads: leaves };
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Tensor<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for var in order.iter().rev() {
            let Some(grad) = pending.remove(&var.id()) else {
                continue;
            };
            let node = &var.node;
            match &node.backward {
                None => {
                    leaves.insert(node.id, grad);
                }
                Some(f) => {
                    let parent_grads = f(&grad, &node.value, &node.parents);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, g) in node.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), p.shape(), "gradient shape for parent");
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&g).expect("gradient shape"),
                            None => {
                                pending.insert(p.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }

    /// Post-order over the gradient-carrying subgraph (parents before children).
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in v.node.parents.iter().rev() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Gradients of leaf variables, keyed by [`Var::id`].
#[derive(Default)]
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id())
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.grads.remove(&var.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
