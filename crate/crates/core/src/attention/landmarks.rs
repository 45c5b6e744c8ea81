use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};

/// Query and key landmarks, `m×d` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet<T = f64> {
    pub q_tilde: Mat<T>,
    pub k_tilde: Mat<T>,
}

impl<T: Real> LandmarkSet<T> {
    pub fn segment_means(q: &Mat<T>, k: &Mat<T>, m: usize) -> Result<Self> {
        Ok(LandmarkSet {
            q_tilde: segment_means(q, m)?,
            k_tilde: segment_means(k, m)?,
        })
    }

    /// Uses the data rows themselves as landmarks (`m = n`).
    pub fn from_data(q: &Mat<T>, k: &Mat<T>) -> Self {
        LandmarkSet {
            q_tilde: q.clone(),
            k_tilde: k.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.q_tilde.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q_tilde.rows() == 0
    }
}

/// Sequence length after padding `n` up to a multiple of `m`.
pub fn padded_len(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Means of `m` contiguous row segments.
///
/// When `m` does not divide `n`, zero rows are prepended until it does, and the
/// means are taken over the padded sequence (each segment has length
/// `padded_len(n, m) / m`).
pub fn segment_means<T: Real>(x: &Mat<T>, m: usize) -> Result<Mat<T>> {
    let n = x.rows();
    if m == 0 || m > n {
        return Err(Error::config(format!(
            "segment means need 1 <= m <= n, got m = {m}, n = {n}"
        )));
    }
    let padded = padded_len(n, m);
    let pad = padded - n;
    let seg = padded / m;
    let seg_len = T::lit(seg as f64);
    let mut out = Mat::zeros(m, x.cols());
    for j in 0..m {
        let dst = out.row_mut(j);
        for p in j * seg..(j + 1) * seg {
            if p < pad {
                continue;
            }
            for (d, &s) in dst.iter_mut().zip(x.row(p - pad)) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d /= seg_len;
        }
    }
    Ok(out)
}
