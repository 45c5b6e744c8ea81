//! Iterative Moore-Penrose pseudoinverse.
//!
//! Starting from `Z₀ = Aᵀ / (‖A‖₁‖A‖∞)` the third-order hyperpower recurrence
//!
//! ```text
//! Z_{j+1} = ¼ Z_j (13I − A Z_j (15I − A Z_j (7I − A Z_j)))
//! ```
//!
//! converges to `A⁺` using only matrix products. The error matrix
//! `E = I − A Z` maps to `¾E³ + ¼E⁴` per step.
//!
//! For singular `A` the components of `Z` outside the range of `Aᵀ` are
//! scaled by 13/4 each step, so rounding noise there grows geometrically.
//! A handful of steps is harmless; running dozens is not.

use crate::error::{Error, Result};
use crate::linalg::{norm_1, norm_inf, Mat, Real};

/// Iteration count used when nothing else is specified.
pub const DEFAULT_ITERS: usize = 6;
/// Stop once `‖I − A Z‖∞` drops below this.
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct PinvResult<T = f64> {
    pub z_star: Mat<T>,
    pub iterations_run: usize,
    /// `‖I − A Z_j‖∞` for `j = 0..=iterations_run`.
    pub residual_trace: Vec<f64>,
    pub converged: bool,
}

impl<T> PinvResult<T> {
    pub fn final_residual(&self) -> f64 {
        *self
            .residual_trace
            .last()
            .expect("trace holds the Z₀ residual")
    }
}

fn require_square<T: Real>(a: &Mat<T>, op: &'static str) -> Result<()> {
    if !a.is_square() || a.rows() == 0 {
        return Err(Error::DimensionMismatch {
            op,
            left: a.shape(),
            right: (a.rows(), a.rows()),
        });
    }
    Ok(())
}

/// `Aᵀ / (‖A‖₁‖A‖∞)`.
pub fn pinv_init<T: Real>(a: &Mat<T>) -> Result<Mat<T>> {
    require_square(a, "pinv_init")?;
    let denom = norm_1(a) * norm_inf(a);
    if denom == T::zero() {
        return Err(Error::Degenerate("pseudoinverse of an all-zero matrix"));
    }
    Ok(a.transpose().scale(T::one() / denom))
}

/// `‖I − P‖∞` for a square product `P = A Z`.
pub fn identity_residual<T: Real>(az: &Mat<T>) -> f64 {
    let n = az.rows();
    (0..n)
        .map(|i| {
            az.row(i)
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let target = if i == j { 1.0 } else { 0.0 };
                    (target - x.as_f64()).abs()
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// One hyperpower step given `Z` and the precomputed product `A Z`.
pub fn hyperpower_step<T: Real>(z: &Mat<T>, az: &Mat<T>) -> Result<Mat<T>> {
    let c = |v: f64| T::lit(v);
    let inner = az.scale(-T::one()).add_identity(c(7.0))?;
    let inner = az.matmul(&inner)?.scale(-T::one()).add_identity(c(15.0))?;
    let inner = az.matmul(&inner)?.scale(-T::one()).add_identity(c(13.0))?;
    Ok(z.matmul(&inner)?.scale(c(0.25)))
}

/// Runs the recurrence from [`pinv_init`] until `‖I − A Z_j‖∞ < tol` or
/// `max_iters` steps. Singular inputs never meet the tolerance; the last
/// iterate is still returned with `converged == false`.
pub fn pinv_iterate<T: Real>(a: &Mat<T>, max_iters: usize, tol: f64) -> Result<PinvResult<T>> {
    require_square(a, "pinv_iterate")?;
    if max_iters == 0 {
        return Err(Error::config("pinv_iterate needs max_iters >= 1"));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::config(format!(
            "pinv tolerance must be positive, got {tol}"
        )));
    }
    let mut z = pinv_init(a)?;
    let mut az = a.matmul(&z)?;
    let mut trace = vec![identity_residual(&az)];
    let mut iterations_run = 0;
    while iterations_run < max_iters && trace[iterations_run] >= tol {
        z = hyperpower_step(&z, &az)?;
        az = a.matmul(&z)?;
        trace.push(identity_residual(&az));
        iterations_run += 1;
    }
    let converged = trace[iterations_run] < tol;
    Ok(PinvResult {
        z_star: z,
        iterations_run,
        residual_trace: trace,
        converged,
    })
}

/// [`pinv_iterate`] with the default iteration count and tolerance.
pub fn pinv<T: Real>(a: &Mat<T>) -> Result<PinvResult<T>> {
    pinv_iterate(a, DEFAULT_ITERS, DEFAULT_TOL)
}
