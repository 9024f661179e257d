use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::{Real, Tensor};

/// Backward record of one tape node. Indices refer to earlier nodes, so the
/// node vector is always in topological order.
pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddAlong {
        x: usize,
        v: usize,
        axis: usize,
    },
    MulAlong {
        x: usize,
        v: usize,
        axis: usize,
    },
    Scale {
        x: usize,
        s: T,
    },
    AddScalar {
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        a_trans: bool,
        b_trans: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Relu {
        x: usize,
    },
    LayerNorm {
        x: usize,
        axis: usize,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride_h: usize,
        stride_w: usize,
    },
    Sum {
        x: usize,
        axis: usize,
    },
    Mean {
        x: usize,
        axis: usize,
    },
    SumAll {
        x: usize,
    },
    L2Normalize {
        x: usize,
        axis: usize,
        norms: Vec<T>,
    },
    Transpose {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Max {
        x: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Arc<Tensor<T>>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// A tape created with [`Tape::inference`] stores values only; calling
/// [`Var::backward`] on one of its variables fails with
/// [`Error::Detached`](crate::Error::Detached).
pub struct Tape<T: Real = f32> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward information.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients flow into (a parameter or a differentiated input).
    pub fn leaf(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        let requires_grad = self.grad_enabled;
        self.push_arc(value.into(), Op::Leaf, requires_grad)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.push_arc(value.into(), Op::Leaf, false)
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> Option<T> {
        self.value().item()
    }
}
