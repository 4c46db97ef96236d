//! Define-by-run reverse-mode tape over dense channel-last tensors.
//!
//! A [`Graph`] is rebuilt for every training step. Leaves hold inputs and
//! parameters; every operation appends a node whose backward rule is
//! dispatched in [`Graph::backward`]. Reduction order is fixed, so results
//! are bitwise reproducible.

use ndarray::{ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::kernels::{self, Pad, PoolKind};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<F: Scalar> {
    Leaf,
    Conv2d { input: NodeId, weight: NodeId, pad: Pad },
    MatMul { input: NodeId, weight: NodeId },
    AddBias { input: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Pelu { input: NodeId, a: NodeId, b: NodeId },
    Relu { input: NodeId },
    Softmax { input: NodeId },
    Pool { input: NodeId, kind: PoolKind, window: usize, stride: usize, pad: Pad, argmax: Vec<usize> },
    Upsample { input: NodeId, factor: usize },
    ConcatChannels { a: NodeId, b: NodeId },
    Rows { input: NodeId, index: Vec<usize> },
    Detach,
    Mse { pred: NodeId, target: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    WeightedSum { terms: Vec<(F, NodeId)> },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        *self.nodes[id.0].value.iter().next().unwrap()
    }

    /// Insert a leaf. Trainable leaves receive gradients in `backward`.
    pub fn leaf(&mut self, value: ArrayD<F>, trainable: bool) -> NodeId {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar_leaf(&mut self, value: F, trainable: bool) -> NodeId {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), value), trainable)
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, pad: Pad) -> Result<NodeId> {
        let v = kernels::conv2d_forward(self.value(input), self.value(weight), pad)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(v, Op::Conv2d { input, weight, pad }, rg))
    }

    /// Dense layer product: `[N,Fin] x [Fin,Fout]`.
    pub fn matmul(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("[N,{}] x [{},Fout]", w.shape()[0], w.shape()[0]),
                format!("{:?} x {:?}", x.shape(), w.shape()),
            ));
        }
        let xv = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let wv = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let v = xv.dot(&wv).into_dyn();
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(v, Op::MatMul { input, weight }, rg))
    }

    /// Broadcast-add a `[C]` bias over the last axis.
    pub fn add_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let b = self.value(bias);
        let c = *x.shape().last().unwrap();
        if b.ndim() != 1 || b.len() != c {
            return Err(Error::shape("add_bias", format!("[{c}]"), format!("{:?}", b.shape())));
        }
        let mut v = x.clone();
        let bs = b.as_slice().unwrap().to_vec();
        let p = v.len() / c;
        {
            let mut flat = v.view_mut().into_shape_with_order((p, c)).unwrap();
            for mut row in flat.rows_mut() {
                for (j, e) in row.iter_mut().enumerate() {
                    *e = *e + bs[j];
                }
            }
        }
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(v, Op::AddBias { input, bias }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add { a, b }, rg))
    }

    /// PELU with scalar (shape `[1]`) trainable parameters a and b.
    pub fn pelu(&mut self, input: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.scalar_value(a);
        let bv = self.scalar_value(b);
        let v = kernels::pelu_forward(self.value(input), av, bv)?;
        let rg = self.rg(input) || self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Pelu { input, a, b }, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = kernels::relu_forward(self.value(input));
        let rg = self.rg(input);
        self.push(v, Op::Relu { input }, rg)
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let v = kernels::softmax_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(v, Op::Softmax { input }, rg))
    }

    pub fn pool2d(&mut self, input: NodeId, kind: PoolKind, window: usize, stride: usize, pad: Pad) -> Result<NodeId> {
        let (v, argmax) = kernels::pool2d_forward(self.value(input), kind, window, stride, pad)?;
        let rg = self.rg(input);
        Ok(self.push(v, Op::Pool { input, kind, window, stride, pad, argmax }, rg))
    }

    pub fn upsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let v = kernels::upsample_forward(self.value(input), factor)?;
        let rg = self.rg(input);
        Ok(self.push(v, Op::Upsample { input, factor }, rg))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::ConcatChannels { a, b }, rg))
    }

    /// Select rows of a `[N,...]` tensor by index (used for the labeled
    /// subset of a mixed batch).
    pub fn rows(&mut self, input: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let x = self.value(input);
        let n = x.shape()[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("row index {bad} out of range for {n} rows")));
        }
        let v = x.select(Axis(0), &index);
        let rg = self.rg(input);
        Ok(self.push(v, Op::Rows { input, index }, rg))
    }

    /// Copy a value while blocking gradient flow.
    pub fn detach(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).clone();
        self.push(v, Op::Detach, false)
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let v = kernels::mse_forward(self.value(pred), self.value(target))?;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Mse { pred, target }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let v = kernels::softmax_ce_forward(self.value(logits), &labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[]), v),
            Op::SoftmaxCrossEntropy { logits, labels },
            rg,
        ))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(F, NodeId)>) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("weighted_sum of zero terms".into()));
        }
        let mut total = F::zero();
        let mut rg = false;
        for &(c, id) in &terms {
            if self.value(id).len() != 1 {
                return Err(Error::shape(
                    "weighted_sum",
                    "scalar term",
                    format!("{:?}", self.value(id).shape()),
                ));
            }
            total = total + c * self.scalar_value(id);
            rg = rg || self.rg(id);
        }
        Ok(self.push(ArrayD::from_elem(IxDyn(&[]), total), Op::WeightedSum { terms }, rg))
    }

    /// Reverse pass from a scalar output. Gradients of trainable leaves are
    /// retrievable through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, output: NodeId) -> Result<Vec<Option<ArrayD<F>>>> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::InvalidArgument("backward requires a scalar output".into()));
        }
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(ArrayD::from_elem(self.nodes[output.0].value.raw_dim(), F::one()));
        for i in (0..=output.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Detach => {}
                Op::Conv2d { input, weight, pad } => {
                    let (gin, gw) =
                        kernels::conv2d_backward(self.value(*input), self.value(*weight), *pad, &g)?;
                    accumulate(&mut grads, self, *input, gin);
                    accumulate(&mut grads, self, *weight, gw);
                }
                Op::MatMul { input, weight } => {
                    let x = self.value(*input).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let w = self.value(*weight).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let gm = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let gx = gm.dot(&w.t()).into_dyn();
                    let gw = x.t().dot(&gm).into_dyn();
                    accumulate(&mut grads, self, *input, gx);
                    accumulate(&mut grads, self, *weight, gw);
                }
                Op::AddBias { input, bias } => {
                    let c = self.value(*bias).len();
                    let p = g.len() / c;
                    let flat = g.view().into_shape_with_order((p, c)).unwrap();
                    let gb = flat.sum_axis(Axis(0)).into_dyn();
                    accumulate(&mut grads, self, *input, g.clone());
                    accumulate(&mut grads, self, *bias, gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, self, *a, g.clone());
                    accumulate(&mut grads, self, *b, g.clone());
                }
                Op::Pelu { input, a, b } => {
                    let av = self.scalar_value(*a);
                    let bv = self.scalar_value(*b);
                    let (gin, ga, gb) = kernels::pelu_backward(self.value(*input), av, bv, &g);
                    accumulate(&mut grads, self, *input, gin);
                    accumulate(&mut grads, self, *a, ArrayD::from_elem(IxDyn(&[1]), ga));
                    accumulate(&mut grads, self, *b, ArrayD::from_elem(IxDyn(&[1]), gb));
                }
                Op::Relu { input } => {
                    let gin = kernels::relu_backward(self.value(*input), &g);
                    accumulate(&mut grads, self, *input, gin);
                }
                Op::Softmax { input } => {
                    let gin = kernels::softmax_backward(&self.nodes[i].value, &g)?;
                    accumulate(&mut grads, self, *input, gin);
                }
                Op::Pool { input, kind, window, stride, pad, argmax } => {
                    let gin = kernels::pool2d_backward(
                        self.value(*input).shape(),
                        *kind,
                        *window,
                        *stride,
                        *pad,
                        argmax,
                        &g,
                    )?;
                    accumulate(&mut grads, self, *input, gin);
                }
                Op::Upsample { input, factor } => {
                    let gin = kernels::upsample_backward(&g, *factor)?;
                    accumulate(&mut grads, self, *input, gin);
                }
                Op::ConcatChannels { a, b } => {
                    let ca = *self.value(*a).shape().last().unwrap();
                    let axis = Axis(g.ndim() - 1);
                    let ga = g.slice_axis(axis, ndarray::Slice::from(0..ca)).to_owned();
                    let gb = g.slice_axis(axis, ndarray::Slice::from(ca..)).to_owned();
                    accumulate(&mut grads, self, *a, ga);
                    accumulate(&mut grads, self, *b, gb);
                }
                Op::Rows { input, index } => {
                    let mut gin = ArrayD::<F>::zeros(self.value(*input).raw_dim());
                    for (r, &src) in index.iter().enumerate() {
                        let row = g.index_axis(Axis(0), r);
                        let mut dst = gin.index_axis_mut(Axis(0), src);
                        dst += &row;
                    }
                    accumulate(&mut grads, self, *input, gin);
                }
                Op::Mse { pred, target } => {
                    let gs = *g.iter().next().unwrap();
                    let (gp, gt) = kernels::mse_backward(self.value(*pred), self.value(*target), gs);
                    accumulate(&mut grads, self, *pred, gp);
                    accumulate(&mut grads, self, *target, gt);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let gs = *g.iter().next().unwrap();
                    let gl = kernels::softmax_ce_backward(self.value(*logits), labels, gs)?;
                    accumulate(&mut grads, self, *logits, gl);
                }
                Op::WeightedSum { terms } => {
                    let gs = *g.iter().next().unwrap();
                    for &(c, id) in terms {
                        let shape = self.value(id).raw_dim();
                        accumulate(&mut grads, self, id, ArrayD::from_elem(shape, gs * c));
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }
}

fn accumulate<F: Scalar>(
    grads: &mut [Option<ArrayD<F>>],
    graph: &Graph<F>,
    id: NodeId,
    g: ArrayD<F>,
) {
    if !graph.rg(id) {
        return;
    }
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Convenience holder for the gradients of a fixed list of leaves.
pub fn take_grads<F: Scalar>(
    grads: &mut [Option<ArrayD<F>>],
    graph: &Graph<F>,
    ids: &[NodeId],
) -> Vec<ArrayD<F>> {
    ids.iter()
        .map(|&id| {
            grads[id.0]
                .take()
                .unwrap_or_else(|| ArrayD::zeros(graph.value(id).raw_dim()))
        })
        .collect()
}
