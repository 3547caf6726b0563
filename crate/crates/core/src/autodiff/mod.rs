//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every executed op as a node holding its output value
//! and whatever the backward rule needs. Nodes are appended in execution
//! order, so replaying them in reverse is a valid topological order.
//! Gradients are accumulated in `f64` and written back to the node tensors
//! once [`Graph::backward`] finishes.

mod activation;
mod conv;
mod linalg;
mod loss;
mod norm;


pub use conv::Conv2dSpec;
pub use norm::BatchStats;

use crate::error::{Result, SvtrError};
use crate::tensor::broadcast::IndexMap;
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: linalg::MatMulPlan,
    },
    Add {
        a: Var,
        b: Var,
        map_a: IndexMap,
        map_b: IndexMap,
    },
    Mul {
        a: Var,
        b: Var,
        map_a: IndexMap,
        map_b: IndexMap,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    /// Masked entries are exact zeros, so the plain softmax rule applies.
    MaskedSoftmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Dropout {
        a: Var,
        scale: Vec<f64>,
    },
    MeanPoolHeight {
        a: Var,
    },
    Ctc {
        a: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Recorded computation, one thread of control.
#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    seed: u64,
    dropout_calls: u64,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// `seed` drives the dropout masks of this graph.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            seed,
            dropout_calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as-is, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf)
    }

    /// A constant input: never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an op output; it requires grad iff any input does.
    pub(crate) fn push(&mut self, shape: &[usize], data: Vec<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::new(shape, data)?.with_requires_grad(rg);
        Ok(self.push_raw(value, op))
    }

    pub(crate) fn next_dropout_seed(&mut self) -> u64 {
        let c = self.dropout_calls;
        self.dropout_calls += 1;
        // splitmix64 over (seed, call counter)
        let mut z = self
            .seed
            .wrapping_add(c.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub(crate) fn data_f64(&self, v: Var) -> Vec<f64> {
        self.value(v).to_f64_vec()
    }

    /// Populates `grad` on every tensor that requires one.
    ///
    /// `loss` must hold exactly one element. Tensors that require a gradient
    /// but do not influence `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(SvtrError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            for (input, contrib) in self.backward_node(idx, &gout) {
                if !self.requires_grad(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(gout);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let n = node.value.numel();
                let g = g.unwrap_or_else(|| vec![0.0; n]);
                node.value
                    .set_grad(Some(g.into_iter().map(T::from_f64).collect()))?;
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, plan } => self.matmul_backward(*a, *b, plan, gout),
            Op::Add { a, b, map_a, map_b } => self.add_backward(*a, *b, map_a, map_b, gout),
            Op::Mul { a, b, map_a, map_b } => self.mul_backward(*a, *b, map_a, map_b, gout),
            Op::Scale { a, factor } => vec![(*a, gout.iter().map(|g| g * factor).collect())],
            Op::Sum { a } => vec![(*a, vec![gout[0]; self.value(*a).numel()])],
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                vec![(*a, vec![gout[0] / n as f64; n])]
            }
            Op::Reshape { a } => vec![(*a, gout.to_vec())],
            Op::Permute { a, perm } => self.permute_backward(*a, perm, gout),
            Op::SliceLast { a, start } => self.slice_backward(*a, *start, node.value.shape(), gout),
            Op::Conv2d { x, w, b, batch, geom } => self.conv2d_backward(*x, *w, *b, *batch, geom, gout),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => self.layernorm_backward(*x, *gamma, *beta, xhat, inv_std, gout),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => self.batchnorm_backward(*x, *gamma, *beta, xhat, inv_std, *training, gout),
            Op::Softmax { a, axis } => self.softmax_backward(idx, *a, *axis, gout),
            Op::MaskedSoftmax { a } => {
                let last = self.value(*a).rank() - 1;
                self.softmax_backward(idx, *a, last, gout)
            }
            Op::LogSoftmax { a } => self.log_softmax_backward(idx, *a, gout),
            Op::Gelu { a } => self.gelu_backward(*a, gout),
            Op::Dropout { a, scale } => {
                vec![(*a, gout.iter().zip(scale).map(|(g, s)| g * s).collect())]
            }
            Op::MeanPoolHeight { a } => self.mean_pool_height_backward(*a, gout),
            Op::Ctc { a, grad } => vec![(*a, grad.iter().map(|g| g * gout[0]).collect())],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[2, 2]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, SvtrError::Contract(_)));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f32));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_input() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_fn(&[4], |i| i as f32 - 1.5));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let want: Vec<f32> = g.value(x).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), &want[..]);
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[3]));
        let unused = g.param(Tensor::ones(&[2]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn inputs_receive_no_grad() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::ones(&[3]));
        let w = g.param(Tensor::ones(&[3]));
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0; 3]);
    }
}
