use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    /// Biased variance over the statistics rows.
    pub var: Vec<T>,
    /// Number of values per channel the statistics were computed from.
    pub count: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sin(Var),
    Square(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        stat_rows: usize,
        inv_std: Vec<T>,
        stats: BatchNormStats<T>,
    },
    Reshape(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    GramSchmidt {
        input: Var,
        r: Vec<T>,
    },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    /// `None` for leaves and for nodes no gradient can reach.
    pub(crate) op: Option<Op<T>>,
    pub(crate) requires_grad: bool,
}

/// Append-only computation graph. Node indices are a topological order.
///
/// Graphs are rebuilt for every optimizer step; a tape is cheap to create and
/// is dropped together with its intermediates.
#[derive(Debug, Default)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are reported for leaves created with
    /// `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    /// Batch statistics saved by a training-mode batchnorm node.
    pub fn batchnorm_stats(&self, v: Var) -> Option<&BatchNormStats<T>> {
        match &self.nodes[v.0].op {
            Some(Op::BatchNorm { stats, .. }) => Some(stats),
            _ => None,
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: requires_grad.then_some(op),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            super::backward::propagate(self, op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if node.op.is_none() && node.requires_grad {
                    let shape = node.value.shape();
                    Some(match g {
                        Some(data) => Tensor::new(shape.to_vec(), data).expect("grad shape"),
                        None => Tensor::zeros(shape),
                    })
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    pub(crate) fn accumulate(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, delta: &[T]) {
        if !nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }
}

/// Leaf gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to a leaf created with
    /// `requires_grad = true`; zero when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
