//! Reverse-mode autodiff on `ndarray` buffers.
//!
//! The graph is a DAG of reference-counted nodes built eagerly by the op
//! functions in the submodules. Node ids are assigned monotonically, so a
//! node's parents always carry smaller ids and a descending-id sweep is a
//! valid topological order for backpropagation. Everything runs on a single
//! thread; given the same inputs and parameters, forward and backward are
//! bit-reproducible.

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

mod conv;
mod norm;
mod ops;

pub use conv::{conv2d, conv_transpose2d};
pub use norm::{instance_norm, linear, masked_avg_pool, softmax_channels, spectral_scale};
pub use ops::{
    add, bce_with_logits_mean, concat_channels, filtered_cross_entropy, l1_loss, leaky_relu,
    mul, mul_broadcast, relu, reshape, scale, slice_channels, sub, sum_list, tanh,
};

/// Dense f32 buffer with dynamic rank.
pub type Data = ArrayD<f32>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Gradient rule for one op: given the gradient flowing into the node,
/// produce the contribution for each parent (None for parents that do not
/// need gradients).
pub(crate) trait GradFn {
    fn backward(&self, grad: &Data, parents: &[Tensor]) -> Vec<Option<Data>>;
    fn name(&self) -> &'static str;
}

struct Node {
    id: u64,
    data: RefCell<Data>,
    grad: RefCell<Option<Data>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    grad_fn: Option<Box<dyn GradFn>>,
}

/// A value in the computation graph. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl Tensor {
    fn new_node(
        data: Data,
        requires_grad: bool,
        parents: Vec<Tensor>,
        grad_fn: Option<Box<dyn GradFn>>,
    ) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                grad_fn,
            }),
        }
    }

    /// Leaf that never receives a gradient (inputs, masks, targets).
    pub fn constant(data: Data) -> Tensor {
        Tensor::new_node(data, false, Vec::new(), None)
    }

    /// Trainable leaf. Keep the handle alive across steps; the optimizer
    /// updates its buffer in place.
    pub fn parameter(data: Data) -> Tensor {
        Tensor::new_node(data, true, Vec::new(), None)
    }

    pub(crate) fn from_op(data: Data, parents: Vec<Tensor>, grad_fn: Box<dyn GradFn>) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = if requires_grad { Some(grad_fn) } else { None };
        Tensor::new_node(data, requires_grad, parents, grad_fn)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Data> {
        self.node.data.borrow()
    }

    /// Overwrite the buffer. Only meaningful on leaves (optimizer steps,
    /// checkpoint restore).
    pub fn set_data(&self, data: Data) {
        *self.node.data.borrow_mut() = data;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.data.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.node.data.borrow().len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        *d.iter().next().unwrap()
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<Data> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Cut the graph: same values, no history, no gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.node.data.borrow().clone())
    }

    /// Backpropagate from a scalar. Accumulates into the `grad` slot of
    /// every reachable node that requires a gradient.
    pub fn backward(&self) {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "backward() needs a scalar loss");
        let seed = ArrayD::ones(IxDyn(d.shape()));
        drop(d);
        self.backward_with(seed);
    }

    fn backward_with(&self, seed: Data) {
        if !self.node.requires_grad {
            return;
        }
        // Collect the reachable subgraph that needs gradients.
        let mut stack = vec![self.clone()];
        let mut seen = std::collections::HashSet::new();
        let mut nodes: Vec<Tensor> = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.node.requires_grad || !seen.insert(t.node.id) {
                continue;
            }
            for p in &t.node.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        // Descending id = reverse topological order.
        nodes.sort_by(|a, b| b.node.id.cmp(&a.node.id));

        accumulate(&self.node.grad, seed);
        for t in &nodes {
            let Some(grad_fn) = t.node.grad_fn.as_ref() else {
                continue; // leaf keeps its accumulated gradient
            };
            let grad = t
                .node
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| panic!("missing gradient for {} node", grad_fn.name()));
            let contributions = grad_fn.backward(&grad, &t.node.parents);
            debug_assert_eq!(contributions.len(), t.node.parents.len());
            for (parent, contrib) in t.node.parents.iter().zip(contributions) {
                if let Some(c) = contrib {
                    if parent.node.requires_grad {
                        debug_assert_eq!(
                            c.shape(),
                            parent.node.data.borrow().shape(),
                            "gradient shape mismatch out of {}",
                            grad_fn.name()
                        );
                        accumulate(&parent.node.grad, c);
                    }
                }
            }
            // Interior gradients are not needed once propagated.
            *t.node.grad.borrow_mut() = None;
        }
    }
}

fn accumulate(slot: &RefCell<Option<Data>>, contribution: Data) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(g) => *g += &contribution,
        None => *slot = Some(contribution),
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}
