//! Minimal reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] walks the tape in reverse. Feature maps are
//! channel-last, so every "row" op treats a tensor as `[rows, last_dim]`.

mod ops;
mod params;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub use params::{ParamId, ParamStore};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[Rc<Tensor<T>>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Operation tape.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    g: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape that binds parameters as constants and records no backward
    /// closures.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: &[usize],
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var { g: self, id }
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, &[], false, None)
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, &[], true, None)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { g: self, id: node };
        }
        let value = store.get(id).clone();
        let v = if self.grad_enabled {
            self.leaf(value)
        } else {
            self.constant(value)
        };
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), T::one()));
        for i in (0..=output.id).rev() {
            let node = &nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<Rc<Tensor<T>>> =
                node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let parent_grads = back(&g, &parent_values, &node.value);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients {
            grads,
            params: self.params.borrow().clone(),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when it did not influence the output.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .get(&id)
            .and_then(|&n| self.grads.get(n))
            .and_then(Option::as_ref)
    }

    /// Dense gradients for every parameter in the store (zeros when unused).
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.g.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    pub(crate) fn unary_op(self, value: Tensor<T>, backward: BackwardFn<T>) -> Var<'g, T> {
        let rg = self.g.requires_grad(self.id);
        self.g.push(value, &[self.id], rg, Some(backward))
    }

    pub(crate) fn binary_op(
        self,
        other: Var<'g, T>,
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<'g, T> {
        let rg = self.g.requires_grad(self.id) || self.g.requires_grad(other.id);
        self.g.push(value, &[self.id, other.id], rg, Some(backward))
    }

    pub(crate) fn nary_op(parents: &[Var<'g, T>], value: Tensor<T>, backward: BackwardFn<T>) -> Var<'g, T> {
        let g = parents[0].g;
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let rg = ids.iter().any(|&i| g.requires_grad(i));
        g.push(value, &ids, rg, Some(backward))
    }
}

#[cfg(test)]
mod tests;
