use serde::{Deserialize, Serialize};

use crate::attention::conv::{depthwise_conv_skip, identity_kernels};
use crate::attention::exact::exact_attention;
use crate::attention::nystrom::nystrom_attention;
use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};
use crate::par;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    Exact,
    Nystrom,
}

/// Projections for one head. `w_*` are `d_model×d_head`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadWeights<T = f64> {
    pub w_q: Mat<T>,
    pub w_k: Mat<T>,
    pub w_v: Mat<T>,
    /// `d_head×conv_kernel` depthwise kernels for the value skip.
    pub conv: Mat<T>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadWeights<T = f64> {
    pub heads: Vec<HeadWeights<T>>,
    /// `d_model×d_model` output projection.
    pub w_o: Mat<T>,
}

impl MultiHeadWeights<f64> {
    /// Gaussian projections scaled by `1/√d_model`, identity conv kernels.
    pub fn random(cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        let std = 1.0 / (cfg.d_model as f64).sqrt();
        let heads = (0..cfg.heads)
            .map(|_| HeadWeights {
                w_q: rng.gaussian_scaled(cfg.d_model, cfg.d_head, std),
                w_k: rng.gaussian_scaled(cfg.d_model, cfg.d_head, std),
                w_v: rng.gaussian_scaled(cfg.d_model, cfg.d_head, std),
                conv: identity_kernels(cfg.d_head, cfg.conv_kernel),
            })
            .collect();
        MultiHeadWeights {
            heads,
            w_o: rng.gaussian_scaled(cfg.d_model, cfg.d_model, std),
        }
    }
}

pub fn project_qkv<T: Real>(
    x: &Mat<T>,
    w_q: &Mat<T>,
    w_k: &Mat<T>,
    w_v: &Mat<T>,
) -> Result<(Mat<T>, Mat<T>, Mat<T>)> {
    Ok((x.matmul(w_q)?, x.matmul(w_k)?, x.matmul(w_v)?))
}

fn head_output<T: Real>(
    x: &Mat<T>,
    head: &HeadWeights<T>,
    cfg: &AttentionConfig,
    kind: AttentionKind,
) -> Result<Mat<T>> {
    let (q, k, v) = project_qkv(x, &head.w_q, &head.w_k, &head.w_v)?;
    let mut out = match kind {
        AttentionKind::Exact => exact_attention(&q, &k, &v)?,
        AttentionKind::Nystrom => nystrom_attention(&q, &k, &v, cfg)?,
    };
    if cfg.use_skip {
        out.add_assign(&depthwise_conv_skip(&v, &head.conv)?)?;
    }
    Ok(out)
}

/// Runs every head, concatenates in head order and applies `W_O`.
/// Heads may be evaluated concurrently; the result does not depend on it.
pub fn multihead<T: Real>(
    x: &Mat<T>,
    weights: &MultiHeadWeights<T>,
    cfg: &AttentionConfig,
    kind: AttentionKind,
) -> Result<Mat<T>> {
    cfg.validate()?;
    if weights.heads.len() != cfg.heads {
        return Err(Error::config(format!(
            "{} head weight sets for {} heads",
            weights.heads.len(),
            cfg.heads
        )));
    }
    if x.cols() != cfg.d_model {
        return Err(Error::DimensionMismatch {
            op: "multihead input",
            left: x.shape(),
            right: (cfg.n, cfg.d_model),
        });
    }
    let outs = par::map_range(cfg.heads, |h| head_output(x, &weights.heads[h], cfg, kind));
    let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
    Mat::hconcat(&outs)?.matmul(&weights.w_o)
}

pub fn multihead_nystrom<T: Real>(
    x: &Mat<T>,
    weights: &MultiHeadWeights<T>,
    cfg: &AttentionConfig,
) -> Result<Mat<T>> {
    multihead(x, weights, cfg, AttentionKind::Nystrom)
}
