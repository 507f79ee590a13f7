//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! The backward pass emits ordinary graph operations instead of raw arrays,
//! so a gradient is itself a differentiable quantity. That property is load
//! bearing: the critic training objective contains a penalty on the norm of
//! an input gradient, and optimizing it requires differentiating through the
//! gradient computation a second time.
//!
//! Graphs are built per step and dropped afterwards. Values are immutable
//! once a node is created; trainable state lives outside the graph (see
//! [`crate::nn`]) and is re-bound as leaf nodes every step.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

pub mod conv;
pub mod ops;
pub mod spectral;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Given the gradient w.r.t. an op's output, produce gradients w.r.t. each
/// parent (None for parents the op does not differentiate through).
type GradFn<T> = Box<dyn Fn(&Var<T>) -> Vec<Option<Var<T>>>>;

struct Node<T: Scalar> {
    id: u64,
    value: ArrayD<T>,
    parents: Vec<Var<T>>,
    grad_fn: Option<GradFn<T>>,
    requires_grad: bool,
}

/// A value in the computation graph.
///
/// Cheap to clone (shared node). Constants carry no graph; leaves are
/// gradient endpoints; op outputs reference their parents.
#[derive(Clone)]
pub struct Var<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Var<T> {
    /// A value gradients do not flow into.
    pub fn constant(value: ArrayD<T>) -> Self {
        Var {
            node: Rc::new(Node {
                id: fresh_id(),
                value,
                parents: Vec::new(),
                grad_fn: None,
                requires_grad: false,
            }),
        }
    }

    /// A gradient endpoint (parameter or probed input).
    pub fn leaf(value: ArrayD<T>) -> Self {
        Var {
            node: Rc::new(Node {
                id: fresh_id(),
                value,
                parents: Vec::new(),
                grad_fn: None,
                requires_grad: true,
            }),
        }
    }

    pub fn scalar_const(v: T) -> Self {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Op-output node. If no parent requires a gradient the result collapses
    /// to a constant and the sub-graph behind it is dropped.
    pub(crate) fn from_op(value: ArrayD<T>, parents: Vec<Var<T>>, grad_fn: GradFn<T>) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Var::constant(value);
        }
        Var {
            node: Rc::new(Node {
                id: fresh_id(),
                value,
                parents,
                grad_fn: Some(grad_fn),
                requires_grad: true,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn value(&self) -> &ArrayD<T> {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn len(&self) -> usize {
        self.node.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Extract a 0-d (or single-element) value.
    pub fn scalar(&self) -> T {
        debug_assert_eq!(self.len(), 1, "scalar() on non-scalar var");
        *self.node.value.iter().next().expect("empty var")
    }

    /// Cut the graph: same value, no gradient history.
    pub fn detach(&self) -> Self {
        Var::constant(self.node.value.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.node.value.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from this node, seeded with ones.
    ///
    /// Returns a map of gradients for every reachable node that requires a
    /// gradient. The returned gradients are graph nodes themselves and can be
    /// differentiated again.
    pub fn backward(&self) -> Grads<T> {
        let mut topo: Vec<Var<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        if self.requires_grad() {
            visited.insert(self.id());
            let mut stack: Vec<(Var<T>, usize)> = vec![(self.clone(), 0)];
            while let Some((v, child_idx)) = stack.pop() {
                if child_idx < v.node.parents.len() {
                    stack.push((v.clone(), child_idx + 1));
                    let p = v.node.parents[child_idx].clone();
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        visited.insert(p.id());
                        stack.push((p, 0));
                    }
                } else {
                    topo.push(v);
                }
            }
        }

        let mut map: HashMap<u64, Var<T>> = HashMap::new();
        map.insert(self.id(), ops::ones(self.shape()));
        // Post-order puts producers before consumers; walk consumers first.
        for v in topo.iter().rev() {
            let Some(grad_fn) = v.node.grad_fn.as_ref() else {
                continue;
            };
            let Some(g) = map.get(&v.id()).cloned() else {
                continue;
            };
            let parent_grads = grad_fn(&g);
            debug_assert_eq!(parent_grads.len(), v.node.parents.len());
            for (parent, pg) in v.node.parents.iter().zip(parent_grads) {
                if !parent.requires_grad() {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(
                        pg.shape(),
                        parent.shape(),
                        "gradient shape mismatch flowing into node {}",
                        parent.id()
                    );
                    map.entry(parent.id())
                        .and_modify(|acc| *acc = ops::add(acc, &pg))
                        .or_insert(pg);
                }
            }
        }
        Grads { map }
    }
}

/// Result of a backward sweep: gradient vars keyed by node id.
pub struct Grads<T: Scalar> {
    map: HashMap<u64, Var<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: &Var<T>) -> Option<&Var<T>> {
        self.map.get(&v.id())
    }

    /// Gradient w.r.t. `v`, or zeros when the node is unreachable.
    pub fn wrt_or_zeros(&self, v: &Var<T>) -> Var<T> {
        self.map
            .get(&v.id())
            .cloned()
            .unwrap_or_else(|| ops::zeros(v.shape()))
    }
}
