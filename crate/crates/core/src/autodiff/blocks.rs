//! Attention blocks assembled from graph primitives. Each block performs the
//! same floating-point operations as its forward-only counterpart in
//! [`crate::attention`], so values agree bit for bit.

use super::{Graph, NodeId};
use crate::error::Result;
use crate::pinv::identity_residual;

pub struct PinvNodes {
    pub z: NodeId,
    pub iterations_run: usize,
    pub residual_trace: Vec<f64>,
}

/// The hyperpower iteration unrolled into the graph. The stopping rule is the
/// same as [`crate::pinv::pinv_iterate`]; the gradient is that of the steps
/// actually taken.
pub fn pinv_unrolled(g: &mut Graph, a: NodeId, max_iters: usize, tol: f64) -> Result<PinvNodes> {
    let mut z = g.pinv_init(a)?;
    let mut az = g.matmul(a, z)?;
    let mut trace = vec![identity_residual(g.value(az))];
    let mut iterations_run = 0;
    while iterations_run < max_iters && trace[iterations_run] >= tol {
        let t = g.scale(az, -1.0);
        let t = g.add_identity(t, 7.0)?;
        let t = g.matmul(az, t)?;
        let t = g.scale(t, -1.0);
        let t = g.add_identity(t, 15.0)?;
        let t = g.matmul(az, t)?;
        let t = g.scale(t, -1.0);
        let t = g.add_identity(t, 13.0)?;
        let zt = g.matmul(z, t)?;
        z = g.scale(zt, 0.25);
        az = g.matmul(a, z)?;
        trace.push(identity_residual(g.value(az)));
        iterations_run += 1;
    }
    Ok(PinvNodes {
        z,
        iterations_run,
        residual_trace: trace,
    })
}

/// `softmax(A Bᵀ/√d)` with `d = cols(A)`.
fn scores(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.value(a).cols() as f64;
    let bt = g.transpose(b);
    let s = g.matmul(a, bt)?;
    let s = g.scale(s, 1.0 / d.sqrt());
    Ok(g.softmax(s))
}

pub fn exact_attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let s = scores(g, q, k)?;
    g.matmul(s, v)
}

pub struct NystromNodes {
    pub out: NodeId,
    pub f_tilde: NodeId,
    pub b_tilde: NodeId,
    pub a_s: NodeId,
    pub pinv: PinvNodes,
}

/// Nyström attention. With `landmarks = None` the landmarks are segment means
/// over `m` segments; otherwise the given `(Q̃, K̃)` nodes are used.
#[allow(clippy::too_many_arguments)]
pub fn nystrom_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    m: usize,
    landmarks: Option<(NodeId, NodeId)>,
    pinv_iters: usize,
    pinv_tol: f64,
) -> Result<NystromNodes> {
    let (qt, kt) = match landmarks {
        Some(pair) => pair,
        None => (g.mean_pool(q, m)?, g.mean_pool(k, m)?),
    };
    let f_tilde = scores(g, q, kt)?;
    let b_tilde = scores(g, qt, k)?;
    let a_s = scores(g, qt, kt)?;
    let pinv = pinv_unrolled(g, a_s, pinv_iters, pinv_tol)?;
    let left = g.matmul(f_tilde, pinv.z)?;
    let right = g.matmul(b_tilde, v)?;
    let out = g.matmul(left, right)?;
    Ok(NystromNodes {
        out,
        f_tilde,
        b_tilde,
        a_s,
        pinv,
    })
}
