use super::kernels::{self, BinaryOp, ConvDims};
use super::tensor::check_axis;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Scale(Var, T),
    Matmul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Gelu(Var),
    BroadcastTo(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        x: Var,
        axis: usize,
        before: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// Node `i` can only depend on nodes `< i`, so the reverse index order is a
/// valid backward schedule.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; its gradient is kept after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, rg, op)
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let out = kernels::binary(self.value(a), self.value(b), op)?;
        Ok(self.push(out, &[a, b], Op::Binary(op, a, b)))
    }

    /// `a + b`, `b` broadcast onto `a` by the trailing-dimension rule.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, &[x], Op::Scale(x, c))
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, &[a, b], Op::Matmul(a, b)))
    }

    /// Same-padded 1D cross-correlation of `x[C_in, L]` or `x[N, C_in, L]`
    /// with `w[C_out, C_in, K]` plus `bias[C_out]`. `K` must be odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let dims = kernels::conv_dims(self.shape(x), self.shape(w), self.shape(b))?;
        let out = kernels::conv1d(self.value(x), self.value(w), self.value(b), dims);
        Ok(self.push(out, &[x, w, b], Op::Conv1d { x, w, b, dims }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        let out = kernels::softmax(self.value(x), axis);
        Ok(self.push(out, &[x], Op::Softmax { x, axis }))
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        let out = kernels::mean_axis(self.value(x), axis);
        Ok(self.push(out, &[x], Op::Mean { x, axis }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, &[x], Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let r = self.shape(x).len();
        let mut seen = vec![false; r];
        if perm.len() != r
            || perm
                .iter()
                .any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!(
                "{perm:?} is not a permutation of {r} axes"
            )));
        }
        let out = kernels::permute(self.value(x), perm);
        Ok(self.push(
            out,
            &[x],
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat(&vals, axis)?;
        Ok(self.push(
            out,
            xs,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, &[x], Op::Gelu(x))
    }

    /// Expands `x` to `shape` by the trailing-aligned broadcast rule.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = kernels::broadcast_to(self.value(x), shape)?;
        Ok(self.push(out, &[x], Op::BroadcastTo(x)))
    }

    /// Keeps `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        check_axis(shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) outside axis {axis} of {shape:?}",
                start + len
            )));
        }
        let out = kernels::narrow(self.value(x), axis, start, len);
        Ok(self.push(out, &[x], Op::Narrow { x, axis, start }))
    }

    /// Zero-pads `axis` with `before` leading and `after` trailing entries.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        if before == 0 && after == 0 {
            return Ok(x);
        }
        let out = kernels::pad(self.value(x), axis, before, after);
        Ok(self.push(out, &[x], Op::Pad { x, axis, before }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires one.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// released as the sweep passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let seed = Tensor::ones(self.shape(loss).to_vec());
        self.accumulate(loss, seed);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (v, dv) in self.input_grads(i, &g) {
                if self.nodes[v.0].requires_grad {
                    self.accumulate(v, dv);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        match &mut self.nodes[v.0].grad {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary(op, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (ga, gb_full) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|x| -x)),
                    BinaryOp::Mul => (
                        kernels::binary(g, bv, BinaryOp::Mul).expect("forward shapes"),
                        kernels::binary(g, av, BinaryOp::Mul).expect("forward shapes"),
                    ),
                };
                vec![(*a, ga), (*b, kernels::reduce_to(&gb_full, bv.shape()))]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::Matmul(a, b) => {
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Conv1d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv1d_backward(val(*x), val(*w), g, *dims);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Softmax { x, axis } => {
                vec![(*x, kernels::softmax_backward(&node.value, g, *axis))]
            }
            Op::Mean { x, axis } => {
                vec![(*x, kernels::mean_axis_backward(g, val(*x).shape(), *axis))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.item()))],
            Op::Reshape(x) => vec![(
                *x,
                g.clone()
                    .reshaped(val(*x).shape().to_vec())
                    .expect("same size"),
            )],
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, kernels::permute(g, &inv))]
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                xs.iter()
                    .map(|&v| {
                        let n = val(v).shape()[*axis];
                        let part = kernels::narrow(g, *axis, start, n);
                        start += n;
                        (v, part)
                    })
                    .collect()
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| gv * kernels::gelu_grad(x))
                    .collect();
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), data))]
            }
            Op::BroadcastTo(x) => vec![(*x, kernels::reduce_to(g, val(*x).shape()))],
            Op::Narrow { x, axis, start } => {
                let n = val(*x).shape()[*axis];
                let len = node.value.shape()[*axis];
                vec![(*x, kernels::pad(g, *axis, *start, n - start - len))]
            }
            Op::Pad { x, axis, before } => {
                let n = val(*x).shape()[*axis];
                vec![(*x, kernels::narrow(g, *axis, *before, n))]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.shape()[1];
                let scale = g.item() / T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d.data_mut()[r * c + y] = d.data()[r * c + y] - T::one();
                }
                d.scale_in_place(scale);
                vec![(*logits, d)]
            }
        }
    }
}
