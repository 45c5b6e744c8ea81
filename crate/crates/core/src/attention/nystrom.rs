use crate::attention::exact::softmax_scores;
use crate::attention::landmarks::LandmarkSet;
use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};
use crate::pinv::{self, PinvResult};

/// Largest `n` for which [`materialize_s_hat`] will build the `n×n` matrix.
pub const MATERIALIZE_LIMIT: usize = 4096;

/// The three factors of the approximate softmax matrix.
#[derive(Clone, Debug)]
pub struct NystromParts<T = f64> {
    /// `softmax(Q K̃ᵀ/√d)`, `n×m`.
    pub f_tilde: Mat<T>,
    /// Approximate pseudoinverse of `softmax(Q̃ K̃ᵀ/√d)`, `m×m`.
    pub a_pinv: Mat<T>,
    /// `softmax(Q̃ Kᵀ/√d)`, `m×n`.
    pub b_tilde: Mat<T>,
    pub diagnostics: PinvResult<T>,
}

fn check_qk<T: Real>(q: &Mat<T>, k: &Mat<T>) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::DimensionMismatch {
            op: "nystrom (q vs k)",
            left: q.shape(),
            right: k.shape(),
        });
    }
    Ok(())
}

/// Factors using segment-means landmarks.
pub fn nystrom_parts<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    m: usize,
    pinv_iters: usize,
) -> Result<NystromParts<T>> {
    check_qk(q, k)?;
    let landmarks = LandmarkSet::segment_means(q, k, m)?;
    nystrom_parts_with(q, k, &landmarks, pinv_iters, pinv::DEFAULT_TOL)
}

/// Factors using caller-supplied landmarks.
pub fn nystrom_parts_with<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    landmarks: &LandmarkSet<T>,
    pinv_iters: usize,
    pinv_tol: f64,
) -> Result<NystromParts<T>> {
    check_qk(q, k)?;
    let LandmarkSet { q_tilde, k_tilde } = landmarks;
    if q_tilde.cols() != q.cols() || k_tilde.cols() != k.cols() || q_tilde.rows() != k_tilde.rows()
    {
        return Err(Error::DimensionMismatch {
            op: "nystrom landmarks",
            left: q_tilde.shape(),
            right: k_tilde.shape(),
        });
    }
    let f_tilde = softmax_scores(q, k_tilde)?;
    let b_tilde = softmax_scores(q_tilde, k)?;
    let a_s = softmax_scores(q_tilde, k_tilde)?;
    let diagnostics = pinv::pinv_iterate(&a_s, pinv_iters, pinv_tol)?;
    Ok(NystromParts {
        f_tilde,
        a_pinv: diagnostics.z_star.clone(),
        b_tilde,
        diagnostics,
    })
}

impl<T: Real> NystromParts<T> {
    /// `(F̃ A⁺)(B̃ V)`; never forms an `n×n` matrix.
    pub fn apply(&self, v: &Mat<T>) -> Result<Mat<T>> {
        if self.b_tilde.cols() != v.rows() {
            return Err(Error::DimensionMismatch {
                op: "nystrom apply (b̃ vs v)",
                left: self.b_tilde.shape(),
                right: v.shape(),
            });
        }
        let left = self.f_tilde.matmul(&self.a_pinv)?;
        let right = self.b_tilde.matmul(v)?;
        left.matmul(&right)
    }
}

/// Nyström attention with segment-means landmarks.
pub fn nystrom_attention<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    cfg: &AttentionConfig,
) -> Result<Mat<T>> {
    check_qk(q, k)?;
    let landmarks = LandmarkSet::segment_means(q, k, cfg.m)?;
    nystrom_attention_with(q, k, v, &landmarks, cfg.pinv_iters, cfg.pinv_tol)
}

/// Nyström attention with caller-supplied landmarks.
pub fn nystrom_attention_with<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    landmarks: &LandmarkSet<T>,
    pinv_iters: usize,
    pinv_tol: f64,
) -> Result<Mat<T>> {
    nystrom_parts_with(q, k, landmarks, pinv_iters, pinv_tol)?.apply(v)
}

/// `F̃ A⁺ B̃` as a dense `n×n` matrix, for error studies only.
pub fn materialize_s_hat<T: Real>(parts: &NystromParts<T>) -> Result<Mat<T>> {
    let n = parts.f_tilde.rows();
    if n > MATERIALIZE_LIMIT {
        return Err(Error::Guard(format!(
            "materializing a {n}x{n} matrix exceeds the n <= {MATERIALIZE_LIMIT} limit"
        )));
    }
    parts.f_tilde.matmul(&parts.a_pinv)?.matmul(&parts.b_tilde)
}
