//! Softmax self-attention, exact and Nyström-approximated.
//!
//! The approximate path never forms the `n×n` softmax matrix. It builds
//! `m` landmark rows for queries and keys by segment means, evaluates the
//! three small softmax blocks
//!
//! ```text
//! F̃ = softmax(Q K̃ᵀ/√d)   (n×m)
//! A = softmax(Q̃ K̃ᵀ/√d)   (m×m)
//! B̃ = softmax(Q̃ Kᵀ/√d)   (m×n)
//! ```
//!
//! and returns `(F̃ · A⁺) · (B̃ · V)` with `A⁺` from [`crate::pinv`].

mod conv;
mod exact;
mod landmarks;
mod multihead;
mod nystrom;

pub use conv::{depthwise_conv_skip, identity_kernels};
pub use exact::{exact_attention, softmax_scores};
pub use landmarks::{padded_len, segment_means, LandmarkSet};
pub use multihead::{
    multihead, multihead_nystrom, project_qkv, AttentionKind, HeadWeights, MultiHeadWeights,
};
pub use nystrom::{
    materialize_s_hat, nystrom_attention, nystrom_attention_with, nystrom_parts,
    nystrom_parts_with, NystromParts, MATERIALIZE_LIMIT,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pinv;

/// Shape and approximation settings for one attention layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Landmark count.
    pub m: usize,
    pub pinv_iters: usize,
    pub pinv_tol: f64,
    /// Odd width of the depthwise value convolution.
    pub conv_kernel: usize,
    pub use_skip: bool,
}

pub const DEFAULT_LANDMARKS: usize = 64;
pub const DEFAULT_CONV_KERNEL: usize = 33;

impl AttentionConfig {
    pub fn new(n: usize, d_model: usize, heads: usize, m: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            n,
            d_model,
            heads,
            d_head: d_model.checked_div(heads).unwrap_or(0),
            m,
            pinv_iters: pinv::DEFAULT_ITERS,
            pinv_tol: pinv::DEFAULT_TOL,
            conv_kernel: DEFAULT_CONV_KERNEL,
            use_skip: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_skip(mut self, conv_kernel: usize) -> Result<Self> {
        self.use_skip = true;
        self.conv_kernel = conv_kernel;
        self.validate()?;
        Ok(self)
    }

    pub fn with_pinv(mut self, iters: usize, tol: f64) -> Result<Self> {
        self.pinv_iters = iters;
        self.pinv_tol = tol;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_head != self.d_model / self.heads {
            return Err(Error::config(format!(
                "d_head {} != d_model / heads = {}",
                self.d_head,
                self.d_model / self.heads
            )));
        }
        if self.m == 0 || self.m > self.n {
            return Err(Error::config(format!(
                "landmark count {} must lie in 1..={}",
                self.m, self.n
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "conv kernel width {} must be odd",
                self.conv_kernel
            )));
        }
        if self.pinv_iters == 0 || self.pinv_tol.is_nan() || self.pinv_tol <= 0.0 {
            return Err(Error::config(
                "pinv needs iters >= 1 and a positive tolerance",
            ));
        }
        Ok(())
    }
}
