//! Wengert-style tape. Every forward op appends a node holding its value and
//! enough saved state to run its vector-Jacobian product; `backward` walks the
//! nodes once in reverse order.

use super::conv::{self, ConvSpec};
use super::{linalg, loss, pointwise, sample, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Token partition for grouped self-attention. Every token belongs to exactly
/// one group and only attends within it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGroups {
    groups: Vec<Vec<usize>>,
    tokens: usize,
}

impl AttentionGroups {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let tokens: usize = groups.iter().map(Vec::len).sum();
        let mut seen = vec![false; tokens];
        for &t in groups.iter().flatten() {
            if t >= tokens || seen[t] {
                return Err(Error::Config(format!(
                    "attention groups must partition 0..{tokens}; token {t} repeated or out of range"
                )));
            }
            seen[t] = true;
        }
        if groups.iter().any(Vec::is_empty) {
            return Err(Error::Config("empty attention group".into()));
        }
        Ok(Self { groups, tokens })
    }

    /// One group containing every token.
    pub fn joint(tokens: usize) -> Self {
        Self {
            groups: vec![(0..tokens).collect()],
            tokens,
        }
    }

    /// Tokens laid out row-major over an `h×w×s` grid; one group per slice index
    /// (attention across the in-plane `h·w` sites).
    pub fn spatial(grid: [usize; 3]) -> Self {
        let [h, w, s] = grid;
        let groups = (0..s)
            .map(|k| (0..h * w).map(|hw| hw * s + k).collect())
            .collect();
        Self {
            groups,
            tokens: h * w * s,
        }
    }

    /// One group per in-plane site (attention across the `s` slices).
    pub fn slice(grid: [usize; 3]) -> Self {
        let [h, w, s] = grid;
        let groups = (0..h * w)
            .map(|hw| (0..s).map(|k| hw * s + k).collect())
            .collect();
        Self {
            groups,
            tokens: h * w * s,
        }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    DeformConv3d {
        input: Var,
        weight: Var,
        offsets: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    GridSample {
        input: Var,
        locations: Var,
    },
    Upsample2x {
        input: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    AddRowBias {
        input: Var,
        bias: Var,
    },
    Softmax {
        input: Var,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: AttentionGroups,
        heads: usize,
        scale: T,
        probs: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Relu {
        input: Var,
    },
    Gelu {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Reshape {
        input: Var,
    },
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    SoftmaxDice {
        logits: Var,
        labels: Vec<u8>,
        probs: Vec<T>,
        eps: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::DeformConv3d { .. } => "deform_conv3d",
            Op::GridSample { .. } => "grid_sample",
            Op::Upsample2x { .. } => "upsample",
            Op::MatMul { .. } => "matmul",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Dropout { .. } => "dropout",
            Op::Sum { .. } => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::SoftmaxDice { .. } => "softmax_dice",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    training: bool,
    fault: Option<String>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            fault: None,
        }
    }

    /// Enables dropout. Off by default.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Test hook: perturbs the first input gradient of every op named `op` by
    /// one percent so gradient checks can be shown to catch a broken backward.
    pub fn inject_fault(&mut self, op: impl Into<String>) {
        self.fault = Some(op.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never receives a gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Per-row attention weights saved by an attention node, one slice per
    /// query row of every head and group.
    pub fn attention_rows(&self, var: Var) -> Option<Vec<&[T]>> {
        match &self.nodes[var.0].op {
            Op::Attention {
                groups,
                heads,
                probs,
                ..
            } => {
                let mut rows = Vec::new();
                let mut off = 0;
                for g in groups.groups() {
                    let n = g.len();
                    for _ in 0..heads * n {
                        rows.push(&probs[off..off + n]);
                        off += n;
                    }
                }
                Some(rows)
            }
            _ => None,
        }
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let value = self.value(output);
        if value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "output must hold one element, got shape {:?}",
                    value.shape()
                ),
            ));
        }
        self.backward_with(output, Tensor::full(value.shape(), T::one()))
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contributions = self.vjp(i, &g)?;
            if self.fault.as_deref() == Some(node.op.name()) {
                if let Some((_, t)) = contributions.first_mut() {
                    let bump = T::c(1.01);
                    t.data_mut().iter_mut().for_each(|x| *x *= bump);
                }
            }
            for (var, contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian product of node `i` against its output cotangent.
    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv3d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (dx, dw, db) = conv::conv3d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    spec,
                    needs(*input),
                    bias.is_some_and(needs),
                )?;
                let mut v = vec![(*input, dx), (*weight, dw)];
                if let (Some(b), Some(db)) = (bias, db) {
                    v.push((*b, db));
                }
                v
            }
            Op::DeformConv3d {
                input,
                weight,
                offsets,
                bias,
                spec,
            } => {
                let grads = conv::deform_conv3d_backward(
                    val(*input),
                    val(*weight),
                    val(*offsets),
                    g,
                    spec,
                    bias.is_some_and(needs),
                )?;
                let mut v = vec![
                    (*input, grads.input),
                    (*offsets, grads.offsets),
                    (*weight, grads.weight),
                ];
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    v.push((*b, db));
                }
                v
            }
            Op::GridSample { input, locations } => {
                let (dx, dloc) = sample::grid_sample_backward(val(*input), val(*locations), g);
                vec![(*input, dx), (*locations, dloc)]
            }
            Op::Upsample2x { input } => {
                vec![(*input, sample::upsample2x_backward(val(*input).shape(), g))]
            }
            Op::MatMul { a, b } => {
                let (da, db) = linalg::matmul_backward(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::AddRowBias { input, bias } => {
                let db = pointwise::row_bias_grad(g, val(*bias).numel());
                vec![(*input, g.clone()), (*bias, db)]
            }
            Op::Softmax { input } => vec![(*input, linalg::softmax_backward(&node.value, g))],
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (dx, dgamma, dbeta) = linalg::layer_norm_backward(val(*gamma), xhat, rstd, g);
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                scale,
                probs,
            } => {
                let (dq, dk, dv) = linalg::attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    groups,
                    *heads,
                    *scale,
                    probs,
                    g,
                );
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => {
                let (da, db) = pointwise::mul_backward(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { input, factor } => vec![(*input, pointwise::map(g, |x| x * *factor))],
            Op::Relu { input } => vec![(*input, pointwise::relu_backward(val(*input), g))],
            Op::Gelu { input } => vec![(*input, pointwise::gelu_backward(val(*input), g))],
            Op::Concat { inputs } => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| val(*v).shape()).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(pointwise::concat_backward(&shapes, g))
                    .collect()
            }
            Op::Reshape { input } => {
                vec![(
                    *input,
                    Tensor::from_parts(val(*input).shape().to_vec(), g.data().to_vec()),
                )]
            }
            Op::Permute { input, axes } => vec![(*input, pointwise::permute_backward(g, axes))],
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, m)| *a * *m).collect();
                vec![(*input, Tensor::from_parts(g.shape().to_vec(), data))]
            }
            Op::Sum { input } => vec![(*input, Tensor::full(val(*input).shape(), g.data()[0]))],
            Op::WeightedSum { input, weights } => {
                let s = g.data()[0];
                let data = weights.iter().map(|w| *w * s).collect();
                vec![(
                    *input,
                    Tensor::from_parts(val(*input).shape().to_vec(), data),
                )]
            }
            Op::SoftmaxDice {
                logits,
                labels,
                probs,
                eps,
            } => {
                let shape = val(*logits).shape();
                vec![(
                    *logits,
                    loss::softmax_dice_backward(shape, labels, probs, *eps, g.data()[0]),
                )]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_never_receive_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let c = tape.constant(Tensor::from_f64(&[3], &[4.0, 5.0, 6.0]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let s = tape.sum(z);
        // s = 2·x², ds/dx = 4x
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -8.0]);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_f64(&[2, 3], &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4]).unwrap());
        let b = tape.param(Tensor::from_f64(&[3, 2], &[1.0, 0.5, -0.3, 0.2, 0.9, -1.1]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let p = tape.softmax_lastdim(c);
        let w = tape.weighted_sum(p, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let g1 = tape.backward(w).unwrap();
        let g2 = tape.backward(w).unwrap();
        assert_eq!(g1.get(a).unwrap().data(), g2.get(a).unwrap().data());
        assert_eq!(g1.get(b).unwrap().data(), g2.get(b).unwrap().data());
    }

    #[test]
    fn grouping_partitions_tokens() {
        let grid = [2, 3, 4];
        for groups in [
            AttentionGroups::joint(24),
            AttentionGroups::spatial(grid),
            AttentionGroups::slice(grid),
        ] {
            let mut all: Vec<usize> = groups.groups().iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..24).collect::<Vec<_>>());
        }
        assert_eq!(AttentionGroups::spatial(grid).groups().len(), 4);
        assert_eq!(AttentionGroups::slice(grid).groups().len(), 6);
        assert!(AttentionGroups::new(vec![vec![0, 1], vec![1]]).is_err());
    }
}
