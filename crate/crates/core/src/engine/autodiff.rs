//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Every [`Var`] owns its forward value and, when any input requires a
//! gradient, a backward rule plus handles to its inputs. The recorded graph
//! is therefore the tape: `backward` walks it from the loss in reverse
//! topological order, visiting each node once. Graphs built from inputs
//! that need no gradient keep no parent links, so inference frees
//! intermediates as soon as they go out of scope.

use std::collections::HashMap;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Backward rule: maps the output gradient to one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    param_key: Option<usize>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a value in the recorded computation.
pub struct Var<T>(Rc<Node<T>>);

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// Input that takes no part in differentiation.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false, None)
    }

    /// Input whose gradient is collected by [`backward`].
    pub fn input(value: Tensor<T>) -> Self {
        Self::leaf(value, true, None)
    }

    pub(crate) fn leaf(value: Tensor<T>, requires_grad: bool, param_key: Option<usize>) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad,
            param_key,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Records a new node. The backward rule is only kept if some parent
    /// requires a gradient.
    pub fn from_op(value: Tensor<T>, parents: &[&Var<T>], backward: BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            value,
            requires_grad,
            param_key: None,
            parents: parents.iter().map(|&p| p.clone()).collect(),
            backward: Some(backward),
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn ptr_eq(&self, other: &Var<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// Gradients produced by one call to [`backward`].
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
    by_param: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Var::input`]. Leaves that
    /// the loss does not depend on get zeros.
    pub fn wrt(&self, var: &Var<T>) -> Tensor<T> {
        self.by_node
            .get(&var.id())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn param(&self, key: usize) -> Option<&Tensor<T>> {
        self.by_param.get(&key)
    }
}

fn topo_order<T: Scalar>(root: &Var<T>) -> Vec<Var<T>> {
    // iterative post-order DFS; each node is emitted once after its parents
    let mut order = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Back-propagates from a scalar loss.
pub fn backward<T: Scalar>(loss: &Var<T>) -> Result<Gradients<T>> {
    if loss.value().numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let mut by_node: HashMap<usize, Tensor<T>> = HashMap::new();
    let mut by_param: HashMap<usize, Tensor<T>> = HashMap::new();
    if !loss.requires_grad() {
        return Ok(Gradients { by_node, by_param });
    }
    by_node.insert(loss.id(), Tensor::ones(loss.shape()));

    let order = topo_order(loss);
    for node in order.iter().rev() {
        let Some(g) = by_node.get(&node.id()) else {
            continue;
        };
        let Some(rule) = &node.0.backward else {
            if let Some(key) = node.0.param_key {
                let g = g.clone();
                match by_param.get_mut(&key) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        by_param.insert(key, g);
                    }
                }
            }
            continue;
        };
        let parent_grads = rule(g);
        debug_assert_eq!(parent_grads.len(), node.0.parents.len());
        // interior gradients are no longer needed once propagated
        by_node.remove(&node.id());
        for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !parent.requires_grad() {
                continue;
            }
            debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape");
            match by_node.get_mut(&parent.id()) {
                Some(acc) => acc.add_assign(&pg),
                None => {
                    by_node.insert(parent.id(), pg);
                }
            }
        }
    }
    Ok(Gradients { by_node, by_param })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ops;

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let x = Var::input(Tensor::new(&[4], vec![1.0f64, -2.0, 0.5, 3.0]).unwrap());
        let loss = ops::sum(&ops::mul(&x, &x).unwrap());
        let g = backward(&loss).unwrap().wrt(&x);
        assert_eq!(g.data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let x = Var::input(Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let c = Var::input(Tensor::scalar(5.0f64));
        let loss = ops::sum(&c);
        let g = backward(&loss).unwrap().wrt(&x);
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Var::input(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates_once_per_use() {
        // y = x*x used twice: loss = sum(y) + sum(y) -> grad = 4x
        let x = Var::input(Tensor::new(&[2], vec![1.5f64, -1.0]).unwrap());
        let y = ops::mul(&x, &x).unwrap();
        let loss = ops::add(&ops::sum(&y), &ops::sum(&y)).unwrap();
        let g = backward(&loss).unwrap().wrt(&x);
        assert_eq!(g.data(), &[6.0, -4.0]);
    }
}
