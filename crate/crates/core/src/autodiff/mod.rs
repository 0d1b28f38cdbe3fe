//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, so node inputs always precede the node. [`Tape::backward`]
//! walks the record once in reverse and returns fresh [`Gradients`]; the tape
//! itself is left intact and may be differentiated again or dropped.

pub(crate) mod kernels;
mod ops;

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels::Chw;

pub use ops::BatchMoments;

type NodeId = usize;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3x3 {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: Chw,
        out_channels: usize,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Normalize {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        geom: Chw,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    GlobalAvgPool {
        input: NodeId,
        plane: usize,
    },
    Spp {
        input: NodeId,
        argmax: Vec<usize>,
    },
    ChannelScale {
        feature: NodeId,
        weights: NodeId,
        geom: Chw,
    },
    BroadcastMul {
        feature: NodeId,
        map: NodeId,
        geom: Chw,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        targets: Vec<usize>,
        classes: usize,
    },
    IndexSelect {
        input: NodeId,
        indices: Vec<usize>,
        row: usize,
    },
    MeanGroups {
        input: NodeId,
        groups: Vec<Vec<usize>>,
        row: usize,
    },
    ConcatInner {
        a: NodeId,
        b: NodeId,
        batch: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Reshape {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    Sum {
        input: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Outstanding `Var`s become invalid.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        let requires_grad = tensor.requires_grad();
        let value = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a constant (never differentiated) leaf.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let shape = tensor.shape().to_vec();
        let value = Tensor::new(&shape, tensor.into_data()).expect("valid tensor");
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf regardless of the tensor's flag.
    pub fn variable(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        let value = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, true)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
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

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every node
    /// that requires them; nothing on the tape is consumed.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if nodes[id].requires_grad {
                ops::propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| if n.requires_grad { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Result of one reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `var`, or `None` when it does not influence the loss.
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `var`, zeros when it does not influence the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Vec<T> {
        self.get(var)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); var.numel()])
    }

    /// Adds the gradient of `var` into `target`'s gradient buffer.
    pub fn accumulate_into(&self, var: Var<'_, T>, target: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => {
                if target.grad().is_none() {
                    target.accumulate_grad(&vec![T::zero(); target.numel()])?;
                }
                Ok(())
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    /// Copy of the current value.
    pub fn to_tensor(&self) -> Tensor<T> {
        let v = self.value();
        Tensor::new(v.shape(), v.data().to_vec()).expect("valid tensor")
    }

    /// First element as f64, for scalar losses.
    pub fn scalar(&self) -> f64 {
        self.value().data()[0].as_f64()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
