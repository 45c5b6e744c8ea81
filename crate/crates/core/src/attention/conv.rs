use crate::error::{Error, Result};
use crate::linalg::{Mat, Real};

/// Per-channel unit impulses: `channels×width` kernels that leave the input unchanged.
pub fn identity_kernels<T: Real>(channels: usize, width: usize) -> Mat<T> {
    let mut k = Mat::zeros(channels, width);
    for c in 0..channels {
        k[(c, width / 2)] = T::one();
    }
    k
}

/// Convolves each column of `v` (`n×d`) along the sequence with its own kernel.
///
/// `kernels` is `d×w` with odd `w`; row `c` is the kernel for column `c`, centred
/// at `w / 2`, with zero padding so the output keeps `n` rows:
/// `out[t][c] = Σ_s kernels[c][s] · v[t + s − w/2][c]`.
pub fn depthwise_conv_skip<T: Real>(v: &Mat<T>, kernels: &Mat<T>) -> Result<Mat<T>> {
    let (n, d) = v.shape();
    let w = kernels.cols();
    if w.is_multiple_of(2) {
        return Err(Error::config(format!("conv kernel width {w} must be odd")));
    }
    if kernels.rows() != d {
        return Err(Error::DimensionMismatch {
            op: "depthwise_conv_skip",
            left: v.shape(),
            right: kernels.shape(),
        });
    }
    let half = w / 2;
    let mut out = Mat::zeros(n, d);
    for t in 0..n {
        for s in 0..w {
            let src = t + s;
            if src < half || src - half >= n {
                continue;
            }
            let src = src - half;
            for c in 0..d {
                out[(t, c)] += kernels[(c, s)] * v[(src, c)];
            }
        }
    }
    Ok(out)
}
