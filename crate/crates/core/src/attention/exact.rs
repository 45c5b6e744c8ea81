use crate::error::{Error, Result};
use crate::linalg::{rowwise_softmax, Mat, Real};

/// `softmax(A Bᵀ / √d)` where `d = a.cols()`.
pub fn softmax_scores<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    let scale = T::one() / T::lit(a.cols() as f64).sqrt();
    Ok(rowwise_softmax(&a.matmul_t(b)?.scale(scale)))
}

/// Full softmax attention `softmax(Q Kᵀ/√d_q) V`.
pub fn exact_attention<T: Real>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>) -> Result<Mat<T>> {
    if q.cols() != k.cols() {
        return Err(Error::DimensionMismatch {
            op: "exact_attention (q vs k)",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::DimensionMismatch {
            op: "exact_attention (k vs v)",
            left: k.shape(),
            right: v.shape(),
        });
    }
    softmax_scores(q, k)?.matmul(v)
}
