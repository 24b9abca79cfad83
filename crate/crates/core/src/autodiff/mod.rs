//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! are appended in execution order, so the tape is always topologically
//! sorted and [`Tape::backward`] simply walks it in reverse, visiting each
//! recorded operation once.
//!
//! ```
//! use masd_core::autodiff::Tape;
//! use masd_core::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
//! ```

mod conv;
pub mod gradcheck;
mod ops;

pub use gradcheck::{gradient_check, GradCheckEntry, GradCheckReport};
pub use ops::BatchNormMode;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
        stride: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Log {
        input: Var,
        eps: T,
    },
    Abs(Var),
    Upsample {
        input: Var,
        factor: usize,
    },
    AvgPool {
        input: Var,
        factor: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reduce {
        input: Var,
        axes: Vec<usize>,
        mean: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: T,
    },
    ConcatChannels(Var, Var),
    MaskApply {
        mask: Var,
        input: Var,
    },
    ShiftDiff {
        input: Var,
        axis: usize,
    },
    Reshape(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations and their values.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return None;
        }
        if !node.requires_grad {
            return None;
        }
        let data = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![T::zero(); node.value.len()],
        };
        Tensor::new(node.value.shape().to_vec(), data).ok()
    }

    /// Fingerprint of which side of zero every `relu` and `abs` input lies on.
    /// Two passes with equal signatures took the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hasher};
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::Abs(x) = node.op {
                for &v in self.nodes[x.0].value.data() {
                    h.write_u8(u8::from(v > T::zero()) | (u8::from(v < T::zero()) << 1));
                }
            }
        }
        h.finish()
    }

    /// Clears accumulated gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a computed value; fails if the forward pass produced a non-finite value.
    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    /// Propagates d(loss)/d(node) to every leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {} elements",
                n
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            ops::backprop(&self.nodes, &mut self.grads, i, &g);
        }
        Ok(())
    }
}

/// Adds `f`'s contribution into the gradient buffer of `v`, allocating on first use.
pub(crate) fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}
