//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node whose parents were
//! created before it, so node order is a topological order and
//! [`Graph::backward`] walks it once in reverse.

mod backward;
mod blocks;

pub use backward::{softmax_backward, Gradients};
pub use blocks::{exact_attention, nystrom_attention, pinv_unrolled, NystromNodes, PinvNodes};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Epsilon inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Differentiable input.
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `x + 1·bias` with a `1×c` bias broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `x + c·I`.
    AddIdentity(NodeId, f64),
    Transpose(NodeId),
    RowSoftmax(NodeId),
    /// Depthwise convolution along rows; kernels are `channels×width`.
    ConvDepthwise {
        x: NodeId,
        kernels: NodeId,
    },
    /// Segment means over `m` segments (front zero padding), `m = 1` is a plain mean.
    MeanPool {
        x: NodeId,
        m: usize,
    },
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// `Aᵀ / (‖A‖₁‖A‖∞)`, differentiated through the maximizing column and row.
    PinvInit(NodeId),
    /// Identity in the forward pass, zero gradient in the backward pass.
    StopGradient(NodeId),
    /// Row lookup: output row `r` is `table[ids[r]]`.
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// Mean softmax cross-entropy of each logits row against its label; `1×1`.
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
pub struct Node {
    pub value: Matrix,
    pub op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, left: &Matrix, right: &Matrix) -> Error {
    Error::DimensionMismatch {
        op,
        left: left.shape(),
        right: right.shape(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(mismatch("add_row", xv, bv));
        }
        let mut v = xv.clone();
        for i in 0..v.rows() {
            for (o, &b) in v.row_mut(i).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scale(c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_identity(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x).add_identity(c)?;
        Ok(self.push(v, Op::AddIdentity(x, c)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = linalg::rowwise_softmax(self.value(x));
        self.push(v, Op::RowSoftmax(x))
    }

    pub fn conv_depthwise(&mut self, x: NodeId, kernels: NodeId) -> Result<NodeId> {
        let v = crate::attention::depthwise_conv_skip(self.value(x), self.value(kernels))?;
        Ok(self.push(v, Op::ConvDepthwise { x, kernels }))
    }

    pub fn mean_pool(&mut self, x: NodeId, m: usize) -> Result<NodeId> {
        let v = crate::attention::segment_means(self.value(x), m)?;
        Ok(self.push(v, Op::MeanPool { x, m }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        if gv.shape() != (1, xv.cols()) || bv.shape() != (1, xv.cols()) {
            return Err(mismatch("layernorm", xv, gv));
        }
        let mut v = Matrix::zeros(xv.rows(), xv.cols());
        for i in 0..xv.rows() {
            let (xhat, _) = normalize_row(xv.row(i));
            for (j, o) in v.row_mut(i).iter_mut().enumerate() {
                *o = xhat[j] * gv[(0, j)] + bv[(0, j)];
            }
        }
        Ok(self.push(v, Op::LayerNorm { x, gain, bias }))
    }

    pub fn pinv_init(&mut self, a: NodeId) -> Result<NodeId> {
        let v = crate::pinv::pinv_init(self.value(a))?;
        Ok(self.push(v, Op::PinvInit(a)))
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient(x))
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::OutOfVocab {
                token: bad,
                vocab: t.rows(),
            });
        }
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Matrix::hconcat(&vals)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::DimensionMismatch {
                op: "cross_entropy",
                left: lv.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= lv.cols()) {
            return Err(Error::config(format!(
                "label {bad} out of range for {} classes",
                lv.cols()
            )));
        }
        let probs = linalg::rowwise_softmax(lv);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &c)| -probs[(r, c)].ln())
            .sum::<f64>()
            / labels.len() as f64;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `x W + b` with a `1×out` bias row.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }
}

/// Returns `(x̂, 1/σ)` for one row.
pub(crate) fn normalize_row(row: &[f64]) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
    (row.iter().map(|x| (x - mean) * inv_std).collect(), inv_std)
}
