//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values are `f64`, stored row-major. Every op eagerly computes its output
//! and records a backward closure; `backward()` on a scalar replays the
//! recorded graph in reverse topological order. The graph is single-use:
//! each forward pass builds fresh nodes and drops them when the tensors go
//! out of scope.

mod grad_check;
mod ops;

pub use grad_check::{grad_check, GradCheckReport};

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid range in {op} for shape {shape:?}")]
    InvalidRange { op: &'static str, shape: Vec<usize> },
    #[error("index {index} out of range {len} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("backward() requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type TensorResult<T = Tensor> = Result<T, TensorError>;

/// Backward closure: given the output gradient, produce one gradient
/// contribution per parent (same order as `Node::parents`).
type BackFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

pub(crate) struct Node {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackFn>,
}

/// Handle to a node in the autodiff graph. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_len(data: &[f64], shape: &[usize]) {
    let numel: usize = shape.iter().product();
    assert_eq!(
        numel,
        data.len(),
        "shape {:?} does not match data length {}",
        shape,
        data.len()
    );
}

impl Tensor {
    /// Constant tensor: never receives gradients.
    pub fn constant(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        check_len(&data, &shape);
        Tensor {
            node: Rc::new(Node {
                data,
                shape,
                requires_grad: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Leaf tensor that accumulates gradients during backward().
    pub fn leaf(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        check_len(&data, &shape);
        Tensor {
            node: Rc::new(Node {
                data,
                shape,
                requires_grad: true,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![v], vec![1])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::constant(vec![0.0; n], shape)
    }

    /// Builds an interior op node. If no parent requires gradients the
    /// result degrades to a constant and records nothing.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackFn,
    ) -> Tensor {
        check_len(&data, &shape);
        let needs = parents.iter().any(|p| p.node.requires_grad);
        if !needs {
            return Tensor::constant(data, shape);
        }
        Tensor {
            node: Rc::new(Node {
                data,
                shape,
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
            }),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Scalar value; panics if not a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape());
        self.node.data[0]
    }

    /// Accumulated gradient, if backward() has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    /// Detached copy: same values, no graph connection.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.node.data.clone(), self.node.shape.clone())
    }

    fn accumulate_grad(node: &Node, contrib: &[f64]) {
        let mut slot = node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode sweep seeded with d(self)/d(self) = 1. `self` must be
    /// scalar. Gradients accumulate in every reachable requires_grad node.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.node.shape.clone()));
        }
        // iterative post-order DFS over the graph
        let mut order: Vec<Rc<Node>> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Rc<Node>, usize)> = vec![(self.node.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.node));
        while let Some((node, child)) = stack.pop() {
            if child < node.parents.len() {
                let next = node.parents[child].node.clone();
                stack.push((node, child + 1));
                if next.requires_grad && visited.insert(Rc::as_ptr(&next)) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        Self::accumulate_grad(&self.node, &[1.0]);
        for node in order.iter().rev() {
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let g = match node.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let contribs = back(&g);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (parent, contrib) in node.parents.iter().zip(contribs) {
                if parent.node.requires_grad {
                    debug_assert_eq!(contrib.len(), parent.numel());
                    Self::accumulate_grad(&parent.node, &contrib);
                }
            }
        }
        Ok(())
    }

    pub(crate) fn rows_cols(&self, op: &'static str) -> TensorResult<(usize, usize)> {
        match self.node.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::InvalidRange {
                op,
                shape: self.node.shape.clone(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_grad_via_sum() {
        let x = Tensor::leaf(vec![1.0, 2.0, 3.0], vec![3]);
        let s = x.sum();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_records_nothing() {
        let x = Tensor::constant(vec![1.0, 2.0], vec![2]);
        let y = x.mul(&x).unwrap().sum();
        assert!(!y.requires_grad());
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // f(x) = sum(x*x) -> grad 2x, the same leaf feeds both factors
        let x = Tensor::leaf(vec![1.0, 2.0], vec![2]);
        let y = x.mul(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::leaf(vec![1.0, 2.0], vec![2]);
        assert!(matches!(x.backward(), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn detach_cuts_the_graph() {
        let x = Tensor::leaf(vec![3.0], vec![1]);
        let y = x.mul(&x).unwrap().detach();
        let z = y.mul(&y).unwrap().sum();
        z.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
