use super::{normalize_row, Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Adjoint of a row-wise softmax: for each row `p` with upstream `g`,
/// `p ⊙ (g − ⟨g, p⟩)`.
pub fn softmax_backward(rows: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if rows.shape() != upstream.shape() {
        return Err(Error::DimensionMismatch {
            op: "softmax_backward",
            left: rows.shape(),
            right: upstream.shape(),
        });
    }
    let mut out = Matrix::zeros(rows.rows(), rows.cols());
    for i in 0..rows.rows() {
        let (p, g) = (rows.row(i), upstream.row(i));
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (&pj, &gj)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pj * (gj - dot);
        }
    }
    Ok(out)
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `id`, or `None` if nothing flowed into it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.index()].as_ref()
    }

    /// Gradient for `id`, zeros if nothing flowed into it.
    pub fn wrt(&self, id: NodeId) -> Matrix {
        match &self.grads[id.index()] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.index()];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Matrix {
        let (r, c) = self.shapes[id.index()];
        self.grads[id.index()]
            .take()
            .unwrap_or_else(|| Matrix::zeros(r, c))
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc
            .add_assign(&g)
            .expect("adjoint shapes match their node values"),
        None => *slot = Some(g),
    }
}

/// Sign with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Index of the first maximum.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Graph {
    /// Accumulates `∂⟨seed, output⟩/∂node` for every node upstream of `output`.
    pub fn backward(&self, output: NodeId, seed: &Matrix) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::DimensionMismatch {
                op: "backward seed",
                left: out_shape,
                right: seed.shape(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.len()];
        grads[output.index()] = Some(seed.clone());
        for idx in (0..=output.index()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(
        &self,
        op: &Op,
        value: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::Constant | Op::StopGradient(_) => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.matmul_t(bv)?;
                let gb = av.transpose().matmul(g)?;
                accumulate(&mut grads[a.index()], ga);
                accumulate(&mut grads[b.index()], gb);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.index()], g.clone());
                accumulate(&mut grads[b.index()], g.clone());
            }
            Op::AddRow(x, bias) => {
                accumulate(&mut grads[x.index()], g.clone());
                let mut gb = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(&mut grads[bias.index()], gb);
            }
            Op::Scale(x, c) => accumulate(&mut grads[x.index()], g.scale(*c)),
            Op::AddIdentity(x, _) => accumulate(&mut grads[x.index()], g.clone()),
            Op::Transpose(x) => accumulate(&mut grads[x.index()], g.transpose()),
            Op::RowSoftmax(x) => accumulate(&mut grads[x.index()], softmax_backward(value, g)?),
            Op::ConvDepthwise { x, kernels } => {
                let (xv, kv) = (self.value(*x), self.value(*kernels));
                let (n, d) = xv.shape();
                let w = kv.cols();
                let half = w / 2;
                let mut gx = Matrix::zeros(n, d);
                let mut gk = Matrix::zeros(d, w);
                for t in 0..n {
                    for s in 0..w {
                        let src = t + s;
                        if src < half || src - half >= n {
                            continue;
                        }
                        let src = src - half;
                        for c in 0..d {
                            gx[(src, c)] += kv[(c, s)] * g[(t, c)];
                            gk[(c, s)] += g[(t, c)] * xv[(src, c)];
                        }
                    }
                }
                accumulate(&mut grads[x.index()], gx);
                accumulate(&mut grads[kernels.index()], gk);
            }
            Op::MeanPool { x, m } => {
                let (n, d) = self.value(*x).shape();
                let padded = crate::attention::padded_len(n, *m);
                let pad = padded - n;
                let seg = padded / m;
                let mut gx = Matrix::zeros(n, d);
                for p in pad..padded {
                    let j = p / seg;
                    for (o, &v) in gx.row_mut(p - pad).iter_mut().zip(g.row(j)) {
                        *o = v / seg as f64;
                    }
                }
                accumulate(&mut grads[x.index()], gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &a) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    if a <= 0.0 {
                        *o = 0.0;
                    }
                }
                accumulate(&mut grads[x.index()], gx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let (n, d) = xv.shape();
                let mut gx = Matrix::zeros(n, d);
                let mut ggain = Matrix::zeros(1, d);
                let mut gbias = Matrix::zeros(1, d);
                for i in 0..n {
                    let (xhat, inv_std) = normalize_row(xv.row(i));
                    let gy = g.row(i);
                    let dxhat: Vec<f64> = (0..d).map(|j| gy[j] * gv[(0, j)]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[(i, j)] = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        ggain[(0, j)] += gy[j] * xhat[j];
                        gbias[(0, j)] += gy[j];
                    }
                }
                accumulate(&mut grads[x.index()], gx);
                accumulate(&mut grads[gain.index()], ggain);
                accumulate(&mut grads[bias.index()], gbias);
            }
            Op::PinvInit(a) => {
                let av = self.value(*a);
                let m = av.rows();
                let col_sums: Vec<f64> = (0..m)
                    .map(|j| (0..m).map(|i| av[(i, j)].abs()).sum())
                    .collect();
                let row_sums: Vec<f64> = (0..m)
                    .map(|i| av.row(i).iter().map(|x| x.abs()).sum())
                    .collect();
                let (c_star, r_star) = (argmax_first(&col_sums), argmax_first(&row_sums));
                let (n1, ninf) = (col_sums[c_star], row_sums[r_star]);
                let s = 1.0 / (n1 * ninf);
                // Z = s·Aᵀ: direct path plus the path through s.
                let mut ga = g.transpose().scale(s);
                let dl_ds: f64 = (0..m)
                    .flat_map(|i| (0..m).map(move |j| (i, j)))
                    .map(|(i, j)| g[(i, j)] * av[(j, i)])
                    .sum();
                for i in 0..m {
                    ga[(i, c_star)] += dl_ds * (-s / n1) * sign(av[(i, c_star)]);
                }
                for j in 0..m {
                    ga[(r_star, j)] += dl_ds * (-s / ninf) * sign(av[(r_star, j)]);
                }
                accumulate(&mut grads[a.index()], ga);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(&mut grads[table.index()], gt);
            }
            Op::SliceCols { x, start } => {
                let (n, d) = self.value(*x).shape();
                let mut gx = Matrix::zeros(n, d);
                for i in 0..n {
                    gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(&mut grads[x.index()], gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    accumulate(&mut grads[p.index()], g.slice_cols(off, w)?);
                    off += w;
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let mut probs = linalg::rowwise_softmax(self.value(*logits));
                let scale = g[(0, 0)] / labels.len() as f64;
                for (r, &c) in labels.iter().enumerate() {
                    probs[(r, c)] -= 1.0;
                }
                accumulate(&mut grads[logits.index()], probs.scale(scale));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Central differences of `⟨w, f(x)⟩` with respect to every entry of `x`.
    fn numeric_grad(x: &Matrix, w: &Matrix, f: impl Fn(&Matrix) -> Matrix) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for idx in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[idx] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[idx] -= h;
            let fp = f(&xp).hadamard(w).unwrap().sum();
            let fm = f(&xm).hadamard(w).unwrap().sum();
            out.as_mut_slice()[idx] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, rel: f64) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            let scale = x.abs().max(y.abs()).max(1e-8);
            assert!(
                (x - y).abs() / scale < rel || (x - y).abs() < 1e-9,
                "{x} vs {y}"
            );
        }
    }

    /// Checks one unary op against finite differences.
    fn check_unary(x: Matrix, build: impl Fn(&mut Graph, NodeId) -> NodeId) {
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let out = build(&mut g, xi);
        let w = Rng::new(99).gaussian(g.value(out).rows(), g.value(out).cols());
        let analytic = g.backward(out, &w).unwrap().wrt(xi);
        let numeric = numeric_grad(&x, &w, |xv| {
            let mut g = Graph::new();
            let xi = g.leaf(xv.clone());
            let o = build(&mut g, xi);
            g.value(o).clone()
        });
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn identity_graph_returns_seed() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::zeros(2, 3));
        let seed = Rng::new(1).gaussian(2, 3);
        assert_eq!(g.backward(x, &seed).unwrap().wrt(x), seed);
    }

    #[test]
    fn matmul_adjoint_is_textbook() {
        let mut rng = Rng::new(2);
        let (a, b, seed) = (rng.gaussian(3, 4), rng.gaussian(4, 2), rng.gaussian(3, 2));
        let mut g = Graph::new();
        let (ai, bi) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let out = g.matmul(ai, bi).unwrap();
        let grads = g.backward(out, &seed).unwrap();
        assert_eq!(grads.wrt(ai), seed.matmul_t(&b).unwrap());
        assert_eq!(grads.wrt(bi), a.transpose().matmul(&seed).unwrap());
    }

    #[test]
    fn seed_shape_checked() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::zeros(2, 2));
        assert!(g.backward(x, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn softmax_backward_cases() {
        let p = Matrix::filled(1, 4, 0.25);
        let g = Matrix::filled(1, 4, 3.0);
        assert!(softmax_backward(&p, &g).unwrap().max_abs() < 1e-15);

        let logits = Matrix::from_rows(&[[0.0, 1.0, -1.0]]).unwrap().scale(1e3);
        let sat = linalg::rowwise_softmax(&logits);
        let up = Rng::new(3).gaussian(1, 3);
        assert!(softmax_backward(&sat, &up).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let x = Rng::new(4).gaussian(1, 6);
        let w = Rng::new(5).gaussian(1, 6);
        let p = linalg::rowwise_softmax(&x);
        let analytic = softmax_backward(&p, &w).unwrap();
        let numeric = numeric_grad(&x, &w, linalg::rowwise_softmax);
        assert!(analytic.max_abs_diff(&numeric).unwrap() < 1e-6);
    }

    #[test]
    fn unary_ops_pass_gradient_check() {
        let mut rng = Rng::new(6);
        check_unary(rng.gaussian(4, 5), |g, x| g.softmax(x));
        check_unary(rng.gaussian(4, 5), |g, x| g.transpose(x));
        check_unary(rng.gaussian(4, 5), |g, x| g.scale(x, -2.5));
        check_unary(rng.gaussian(4, 4), |g, x| g.add_identity(x, 3.0).unwrap());
        check_unary(rng.gaussian(4, 5), |g, x| g.relu(x));
        check_unary(rng.gaussian(7, 3), |g, x| g.mean_pool(x, 3).unwrap());
        check_unary(rng.gaussian(7, 3), |g, x| g.mean_pool(x, 1).unwrap());
        check_unary(rng.gaussian(4, 6), |g, x| g.slice_cols(x, 2, 3).unwrap());
        check_unary(rng.gaussian(5, 2), |g, x| {
            g.gather(x, &[4, 0, 4, 2]).unwrap()
        });
        check_unary(rng.gaussian(3, 3), |g, x| {
            let s = g.softmax(x);
            g.pinv_init(s).unwrap()
        });
        check_unary(rng.gaussian(3, 3), |g, x| g.pinv_init(x).unwrap());
    }

    #[test]
    fn binary_ops_pass_gradient_check() {
        let mut rng = Rng::new(7);
        let other = rng.gaussian(4, 5);
        check_unary(rng.gaussian(4, 5), |g, x| {
            let o = g.constant(other.clone());
            g.add(x, o).unwrap()
        });
        let bias = rng.gaussian(1, 5);
        check_unary(rng.gaussian(4, 5), |g, x| {
            let b = g.leaf(bias.clone());
            g.add_row(x, b).unwrap()
        });
        let rows = rng.gaussian(4, 5);
        check_unary(rng.gaussian(1, 5), |g, b| {
            let x = g.leaf(rows.clone());
            g.add_row(x, b).unwrap()
        });
        let right = rng.gaussian(5, 2);
        check_unary(rng.gaussian(3, 5), |g, x| {
            let r = g.leaf(right.clone());
            g.matmul(x, r).unwrap()
        });
        let other = rng.gaussian(4, 2);
        check_unary(rng.gaussian(4, 3), |g, x| {
            let o = g.leaf(other.clone());
            g.concat_cols(&[o, x]).unwrap()
        });
    }

    #[test]
    fn conv_gradients() {
        let mut rng = Rng::new(8);
        let kernels = rng.gaussian(3, 5);
        check_unary(rng.gaussian(9, 3), |g, x| {
            let k = g.leaf(kernels.clone());
            g.conv_depthwise(x, k).unwrap()
        });
        let values = rng.gaussian(9, 3);
        check_unary(rng.gaussian(3, 5), |g, k| {
            let x = g.leaf(values.clone());
            g.conv_depthwise(x, k).unwrap()
        });
    }

    #[test]
    fn layernorm_gradients() {
        let mut rng = Rng::new(9);
        let (gain, bias) = (rng.gaussian(1, 6), rng.gaussian(1, 6));
        check_unary(rng.gaussian(4, 6), |g, x| {
            let (gi, bi) = (g.leaf(gain.clone()), g.leaf(bias.clone()));
            g.layernorm(x, gi, bi).unwrap()
        });
        let x = rng.gaussian(4, 6);
        check_unary(gain.clone(), |g, gi| {
            let (xi, bi) = (g.leaf(x.clone()), g.leaf(bias.clone()));
            g.layernorm(xi, gi, bi).unwrap()
        });
        check_unary(bias.clone(), |g, bi| {
            let (xi, gi) = (g.leaf(x.clone()), g.leaf(gain.clone()));
            g.layernorm(xi, gi, bi).unwrap()
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        let labels = [1usize, 0, 2];
        check_unary(Rng::new(10).gaussian(3, 3), |g, x| {
            g.cross_entropy(x, &labels).unwrap()
        });
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let x = g.leaf(Rng::new(11).gaussian(2, 2));
        let s = g.stop_gradient(x);
        let y = g.scale(s, 2.0);
        let grads = g.backward(y, &Matrix::filled(2, 2, 1.0)).unwrap();
        assert_eq!(grads.wrt(x), Matrix::zeros(2, 2));
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut rng = Rng::new(12);
        let mut g = Graph::new();
        let a = g.leaf(rng.gaussian(4, 4));
        let b = g.leaf(rng.gaussian(4, 4));
        let s = g.softmax(a);
        let p = g.matmul(s, b).unwrap();
        let out = g.relu(p);
        let grads = g.backward(out, &Matrix::zeros(4, 4)).unwrap();
        assert!(grads.wrt(a).as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(b).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_vocab_gather() {
        let mut g = Graph::new();
        let t = g.leaf(Matrix::zeros(3, 2));
        assert!(matches!(
            g.gather(t, &[0, 3]),
            Err(Error::OutOfVocab { token: 3, vocab: 3 })
        ));
    }
}
