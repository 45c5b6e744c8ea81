//! Nyström-approximated softmax self-attention.
//!
//! * [`linalg`]: dense row-major matrices, softmax, norms, a Gauss-Jordan oracle.
//! * [`pinv`]: the iterative Moore-Penrose pseudoinverse.
//! * [`attention`]: exact attention, segment-means landmarks, the Nyström
//!   factorization, the depthwise-convolution value skip and multi-head wrapping.
//! * [`autodiff`]: a reverse-mode tape over the same operations.
//! * [`encoder`]: a small transformer encoder and a synthetic training task.
//! * [`bench`]: timing, memory and approximation-error studies.
//! * [`golden`]: fixture generation and checking.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod encoder;
pub mod error;
pub mod golden;
pub mod linalg;
pub mod par;
pub mod pinv;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::{Mat, Matrix, MatrixF32, Real};
