//! A small post-layernorm transformer encoder with exact or Nyström attention.
//!
//! ```text
//! tokens → embed + position → L × [ x = LN(x + Attn(x)); x = LN(x + FF(x)) ] → mean → linear → 2 logits
//! ```

mod task;
mod train;

pub use task::{oracle_label, Sample, ToyTask};
pub use train::{
    batch_gradients, evaluate, train, train_with_log, write_trace, Adam, Optimizer, OptimizerKind,
    Sgd, TraceRow, TrainOptions, TrainTrace,
};

use serde::{Deserialize, Serialize};

use crate::attention::identity_kernels;
use crate::autodiff::{self, Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pinv;
use crate::rng::Rng;

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NystromSpec {
    pub landmarks: usize,
    pub pinv_iters: usize,
    pub pinv_tol: f64,
    /// Use the projected rows themselves as landmarks (requires `landmarks == n`).
    pub data_landmarks: bool,
    /// Width of the depthwise value skip, if any.
    pub conv_kernel: Option<usize>,
}

impl NystromSpec {
    pub fn new(landmarks: usize) -> Self {
        NystromSpec {
            landmarks,
            pinv_iters: pinv::DEFAULT_ITERS,
            pinv_tol: pinv::DEFAULT_TOL,
            data_landmarks: false,
            conv_kernel: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EncoderAttention {
    Exact,
    Nystrom(NystromSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub n: usize,
    pub attention: EncoderAttention,
}

impl EncoderConfig {
    /// 2 layers, width 64, feed-forward 128, 2 heads.
    pub fn small(vocab: usize, n: usize, attention: EncoderAttention) -> Self {
        EncoderConfig {
            layers: 2,
            d_model: 64,
            d_hidden: 128,
            heads: 2,
            vocab,
            n,
            attention,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.vocab == 0 || self.n == 0 {
            return Err(Error::config("layers, vocab and n must be positive"));
        }
        if let EncoderAttention::Nystrom(spec) = &self.attention {
            if spec.landmarks == 0 || spec.landmarks > self.n {
                return Err(Error::config(format!(
                    "landmark count {} must lie in 1..={}",
                    spec.landmarks, self.n
                )));
            }
            if spec.data_landmarks && spec.landmarks != self.n {
                return Err(Error::config("data landmarks need landmarks == n"));
            }
            if spec.conv_kernel.is_some_and(|w| w % 2 == 0) {
                return Err(Error::config("conv kernel width must be odd"));
            }
            if spec.pinv_iters == 0 {
                return Err(Error::config("pinv_iters must be >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub b_q: Matrix,
    pub w_k: Matrix,
    pub b_k: Matrix,
    pub w_v: Matrix,
    pub b_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    /// One `d_head×width` kernel bank per head, present only with a value skip.
    pub conv: Vec<Matrix>,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w_ff1: Matrix,
    pub b_ff1: Matrix,
    pub w_ff2: Matrix,
    pub b_ff2: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderParams {
    pub token_embed: Matrix,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub cls_w: Matrix,
    pub cls_b: Matrix,
}

fn uniform_linear(rng: &mut Rng, fan_in: usize, fan_out: usize) -> (Matrix, Matrix) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (
        rng.uniform(fan_in, fan_out, -bound, bound),
        rng.uniform(1, fan_out, -bound, bound),
    )
}

impl EncoderParams {
    /// Linear layers `U(±1/√fan_in)`, token embeddings `N(0, 1)`, positions
    /// `N(0, 0.02²)`, layernorm gain 1 and bias 0, conv kernels unit impulses.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let d = cfg.d_model;
        let token_embed = rng.gaussian(cfg.vocab, d);
        let pos_embed = rng.gaussian_scaled(cfg.n, d, 0.02);
        let conv_width = match &cfg.attention {
            EncoderAttention::Nystrom(spec) => spec.conv_kernel,
            EncoderAttention::Exact => None,
        };
        let layers = (0..cfg.layers)
            .map(|_| {
                let (w_q, b_q) = uniform_linear(&mut rng, d, d);
                let (w_k, b_k) = uniform_linear(&mut rng, d, d);
                let (w_v, b_v) = uniform_linear(&mut rng, d, d);
                let (w_o, b_o) = uniform_linear(&mut rng, d, d);
                let (w_ff1, b_ff1) = uniform_linear(&mut rng, d, cfg.d_hidden);
                let (w_ff2, b_ff2) = uniform_linear(&mut rng, cfg.d_hidden, d);
                let conv = conv_width
                    .map(|w| {
                        (0..cfg.heads)
                            .map(|_| identity_kernels(cfg.d_head(), w))
                            .collect()
                    })
                    .unwrap_or_default();
                LayerParams {
                    w_q,
                    b_q,
                    w_k,
                    b_k,
                    w_v,
                    b_v,
                    w_o,
                    b_o,
                    conv,
                    ln1_gain: Matrix::filled(1, d, 1.0),
                    ln1_bias: Matrix::zeros(1, d),
                    w_ff1,
                    b_ff1,
                    w_ff2,
                    b_ff2,
                    ln2_gain: Matrix::filled(1, d, 1.0),
                    ln2_bias: Matrix::zeros(1, d),
                }
            })
            .collect();
        let (cls_w, cls_b) = uniform_linear(&mut rng, d, NUM_CLASSES);
        Ok(EncoderParams {
            token_embed,
            pos_embed,
            layers,
            cls_w,
            cls_b,
        })
    }

    /// Every tensor in a fixed order; [`Self::tensors_mut`] and the leaf ids
    /// returned by [`build_graph`] follow the same order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_embed, &self.pos_embed];
        for l in &self.layers {
            out.extend([
                &l.w_q, &l.b_q, &l.w_k, &l.b_k, &l.w_v, &l.b_v, &l.w_o, &l.b_o,
            ]);
            out.extend(l.conv.iter());
            out.extend([
                &l.ln1_gain,
                &l.ln1_bias,
                &l.w_ff1,
                &l.b_ff1,
                &l.w_ff2,
                &l.b_ff2,
                &l.ln2_gain,
                &l.ln2_bias,
            ]);
        }
        out.extend([&self.cls_w, &self.cls_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embed, &mut self.pos_embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.w_q, &mut l.b_q, &mut l.w_k, &mut l.b_k, &mut l.w_v, &mut l.b_v, &mut l.w_o,
                &mut l.b_o,
            ]);
            out.extend(l.conv.iter_mut());
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.w_ff1,
                &mut l.b_ff1,
                &mut l.w_ff2,
                &mut l.b_ff2,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
            ]);
        }
        out.extend([&mut self.cls_w, &mut self.cls_b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    /// Parameters outside the attention sub-blocks (projections and value-skip kernels).
    pub fn non_attention_param_count(&self) -> usize {
        let attention: usize = self
            .layers
            .iter()
            .map(|l| {
                [
                    &l.w_q, &l.b_q, &l.w_k, &l.b_k, &l.w_v, &l.b_v, &l.w_o, &l.b_o,
                ]
                .iter()
                .chain(l.conv.iter().collect::<Vec<_>>().iter())
                .map(|t| t.as_slice().len())
                .sum::<usize>()
            })
            .sum();
        self.param_count() - attention
    }
}

/// Handles into a graph built by [`build_graph`].
pub struct EncoderGraph {
    pub graph: Graph,
    pub logits: NodeId,
    /// Leaf ids in [`EncoderParams::tensors`] order.
    pub params: Vec<NodeId>,
}

fn attention_block(
    g: &mut Graph,
    x: NodeId,
    layer: &[NodeId],
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    let (w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o) = (
        layer[0], layer[1], layer[2], layer[3], layer[4], layer[5], layer[6], layer[7],
    );
    let q = g.linear(x, w_q, b_q)?;
    let k = g.linear(x, w_k, b_k)?;
    let v = g.linear(x, w_v, b_v)?;
    let dh = cfg.d_head();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let out = match &cfg.attention {
            EncoderAttention::Exact => autodiff::exact_attention(g, qh, kh, vh)?,
            EncoderAttention::Nystrom(spec) => {
                let landmarks = spec.data_landmarks.then_some((qh, kh));
                let ny = autodiff::nystrom_attention(
                    g,
                    qh,
                    kh,
                    vh,
                    spec.landmarks,
                    landmarks,
                    spec.pinv_iters,
                    spec.pinv_tol,
                )?;
                match spec.conv_kernel {
                    Some(_) => {
                        let skip = g.conv_depthwise(vh, layer[8 + h])?;
                        g.add(ny.out, skip)?
                    }
                    None => ny.out,
                }
            }
        };
        heads.push(out);
    }
    let cat = g.concat_cols(&heads)?;
    g.linear(cat, w_o, b_o)
}

/// Builds the forward graph for one sequence, registering every parameter as a leaf.
pub fn build_graph(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &[usize],
) -> Result<EncoderGraph> {
    if tokens.len() != cfg.n {
        return Err(Error::DimensionMismatch {
            op: "encoder tokens",
            left: (tokens.len(), 1),
            right: (cfg.n, 1),
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::OutOfVocab {
            token: bad,
            vocab: cfg.vocab,
        });
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .tensors()
        .into_iter()
        .map(|t| g.leaf(t.clone()))
        .collect();
    let per_layer = 8 + params.layers.first().map_or(0, |l| l.conv.len()) + 8;

    let emb = g.gather(ids[0], tokens)?;
    let mut x = g.add(emb, ids[1])?;
    for li in 0..cfg.layers {
        let layer = &ids[2 + li * per_layer..2 + (li + 1) * per_layer];
        let rest = &layer[per_layer - 8..];
        let attn = attention_block(&mut g, x, layer, cfg)?;
        let res = g.add(x, attn)?;
        x = g.layernorm(res, rest[0], rest[1])?;
        let h = g.linear(x, rest[2], rest[3])?;
        let h = g.relu(h);
        let h = g.linear(h, rest[4], rest[5])?;
        let res = g.add(x, h)?;
        x = g.layernorm(res, rest[6], rest[7])?;
    }
    let pooled = g.mean_pool(x, 1)?;
    let n_ids = ids.len();
    let logits = g.linear(pooled, ids[n_ids - 2], ids[n_ids - 1])?;
    Ok(EncoderGraph {
        graph: g,
        logits,
        params: ids,
    })
}

/// Class logits (`1×2`) for one token sequence.
pub fn encoder_forward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &[usize],
) -> Result<Matrix> {
    let eg = build_graph(params, cfg, tokens)?;
    Ok(eg.graph.value(eg.logits).clone())
}
