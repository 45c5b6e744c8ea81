//! Timing, memory and approximation-error studies.
//!
//! Memory is counted analytically from the buffers each scheme allocates;
//! timings are medians over repetitions on a single thread.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    exact_attention, materialize_s_hat, nystrom_attention_with, nystrom_parts_with, softmax_scores,
    LandmarkSet, MATERIALIZE_LIMIT,
};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Matrix, Real};
use crate::par;
use crate::pinv;
use crate::rng::Rng;

pub const D_HEAD: usize = 64;
pub const MIN_REPS: usize = 5;
pub const DEFAULT_EXACT_CUTOFF: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Exact,
    Nystrom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

/// Bytes of the `n×n` score buffer.
pub fn exact_bytes(n: usize, precision: Precision) -> usize {
    n * n * precision.bytes()
}

/// Bytes of the landmark block (`m·d`), `F̃` (`n×m`), the pseudoinverse
/// (`m×m`), `B̃` (`m×n`) and the output (`n×d_v`).
pub fn nystrom_bytes(n: usize, m: usize, d: usize, d_v: usize, precision: Precision) -> usize {
    (m * d + n * m + m * m + m * n + n * d_v) * precision.bytes()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub scheme: Scheme,
    pub precision: Precision,
    pub n: usize,
    pub m: usize,
    pub d_head: usize,
    pub reps: usize,
    pub median_ms: Option<f64>,
    pub peak_bytes: usize,
    pub rel_frobenius: Option<f64>,
    pub max_row_sum_dev: Option<f64>,
    pub skipped: bool,
}

pub const BENCH_CSV_HEADER: [&str; 11] = [
    "scheme",
    "precision",
    "n",
    "m",
    "d_head",
    "reps",
    "median_ms",
    "peak_bytes",
    "rel_frobenius",
    "max_row_sum_dev",
    "skipped",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingOptions {
    pub m: usize,
    pub reps: usize,
    pub seed: u64,
    /// Exact attention is skipped for `n` above this.
    pub exact_cutoff: usize,
    pub precision: Precision,
    /// Compute error metrics where `n` permits materialization.
    pub with_errors: bool,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        ScalingOptions {
            m: 64,
            reps: 7,
            seed: 0,
            exact_cutoff: DEFAULT_EXACT_CUTOFF,
            precision: Precision::F64,
            with_errors: true,
        }
    }
}

/// Median of `samples`; the mean of the two middle values for even counts.
pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

fn time_reps<R>(reps: usize, mut f: impl FnMut() -> Result<R>) -> Result<f64> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(f()?);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(&samples))
}

fn inputs(seed: u64, n: usize, d: usize) -> (Matrix, Matrix, Matrix) {
    let mut rng = Rng::derive(seed, n as u64);
    (rng.gaussian(n, d), rng.gaussian(n, d), rng.gaussian(n, d))
}

/// `(‖Ŝ − S‖_F / ‖S‖_F, max_i |Σ_j Ŝ_ij − 1|)`.
pub fn approximation_error<T: Real>(s_hat: &Mat<T>, s: &Mat<T>) -> Result<(f64, f64)> {
    let diff = s_hat.sub(s)?;
    let rel = diff.frobenius_norm().as_f64() / s.frobenius_norm().as_f64();
    Ok((rel, max_row_sum_dev(s_hat)))
}

pub fn max_row_sum_dev<T: Real>(m: &Mat<T>) -> f64 {
    m.row_sums()
        .into_iter()
        .map(|r| (r.as_f64() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn scaling_for<T: Real>(ns: &[usize], opts: &ScalingOptions) -> Result<Vec<BenchRecord>> {
    let mut out = Vec::new();
    for &n in ns {
        let (q, k, v) = inputs(opts.seed, n, D_HEAD);
        let (q, k, v) = (q.cast::<T>(), k.cast::<T>(), v.cast::<T>());
        let exact_ok = n <= opts.exact_cutoff;
        let materialize = opts.with_errors && exact_ok && n <= MATERIALIZE_LIMIT;

        let exact_ms = if exact_ok {
            Some(time_reps(opts.reps, || exact_attention(&q, &k, &v))?)
        } else {
            None
        };
        let s = if materialize {
            Some(softmax_scores(&q, &k)?)
        } else {
            None
        };
        out.push(BenchRecord {
            scheme: Scheme::Exact,
            precision: opts.precision,
            n,
            m: n,
            d_head: D_HEAD,
            reps: opts.reps,
            median_ms: exact_ms,
            peak_bytes: exact_bytes(n, opts.precision),
            rel_frobenius: s.as_ref().map(|_| 0.0),
            max_row_sum_dev: s.as_ref().map(max_row_sum_dev),
            skipped: !exact_ok,
        });

        let nystrom_ms = time_reps(opts.reps, || {
            let landmarks = LandmarkSet::segment_means(&q, &k, opts.m)?;
            nystrom_attention_with(
                &q,
                &k,
                &v,
                &landmarks,
                pinv::DEFAULT_ITERS,
                pinv::DEFAULT_TOL,
            )
        })?;
        let errors = match &s {
            Some(s) => {
                let landmarks = LandmarkSet::segment_means(&q, &k, opts.m)?;
                let parts =
                    nystrom_parts_with(&q, &k, &landmarks, pinv::DEFAULT_ITERS, pinv::DEFAULT_TOL)?;
                Some(approximation_error(&materialize_s_hat(&parts)?, s)?)
            }
            None => None,
        };
        out.push(BenchRecord {
            scheme: Scheme::Nystrom,
            precision: opts.precision,
            n,
            m: opts.m,
            d_head: D_HEAD,
            reps: opts.reps,
            median_ms: Some(nystrom_ms),
            peak_bytes: nystrom_bytes(n, opts.m, D_HEAD, D_HEAD, opts.precision),
            rel_frobenius: errors.map(|e| e.0),
            max_row_sum_dev: errors.map(|e| e.1),
            skipped: false,
        });
    }
    Ok(out)
}

/// Times exact and Nyström attention for each `n` on Gaussian inputs with
/// `d_head = 64`. Runs on one thread regardless of the ambient pool.
pub fn bench_scaling(ns: &[usize], opts: &ScalingOptions) -> Result<Vec<BenchRecord>> {
    if opts.reps < MIN_REPS {
        return Err(Error::config(format!(
            "reps must be >= {MIN_REPS}, got {}",
            opts.reps
        )));
    }
    if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "lengths must be non-empty and strictly ascending",
        ));
    }
    if let Some(&n) = ns.iter().find(|&&n| n < opts.m) {
        return Err(Error::config(format!(
            "length {n} is smaller than the landmark count {}",
            opts.m
        )));
    }
    par::with_threads(1, || match opts.precision {
        Precision::F64 => scaling_for::<f64>(ns, opts),
        Precision::F32 => scaling_for::<f32>(ns, opts),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorOptions {
    pub pinv_iters: usize,
    pub pinv_tol: f64,
    /// Use the data rows as landmarks (requires `m == n`).
    pub data_landmarks: bool,
}

impl Default for ErrorOptions {
    fn default() -> Self {
        ErrorOptions {
            pinv_iters: pinv::DEFAULT_ITERS,
            pinv_tol: pinv::DEFAULT_TOL,
            data_landmarks: false,
        }
    }
}

/// One per-seed observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub m: usize,
    pub seed: u64,
    pub rel_frobenius: f64,
    pub max_row_sum_dev: f64,
    pub pinv_residual: f64,
    pub converged: bool,
}

/// Aggregate over seeds for one landmark count. `std` is the sample standard
/// deviation (zero for a single seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub seeds: usize,
    pub mean_rel_frobenius: f64,
    pub std_rel_frobenius: f64,
    pub mean_max_row_sum_dev: f64,
    pub mean_pinv_residual: f64,
    pub converged: usize,
}

pub const ERROR_CSV_HEADER: [&str; 9] = [
    "n",
    "d",
    "m",
    "seeds",
    "mean_rel_frobenius",
    "std_rel_frobenius",
    "mean_max_row_sum_dev",
    "mean_pinv_residual",
    "converged",
];

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt())
}

/// Per-seed error of the materialized approximation against exact softmax
/// scores. Seed `s` draws standard Gaussian `Q, K` (`n×d`) shared by every `m`.
pub fn error_samples(
    n: usize,
    d: usize,
    ms: &[usize],
    seeds: usize,
    opts: &ErrorOptions,
) -> Result<Vec<ErrorSample>> {
    if n > MATERIALIZE_LIMIT {
        return Err(Error::Guard(format!(
            "error study needs n <= {MATERIALIZE_LIMIT}, got {n}"
        )));
    }
    if n == 0 || d == 0 || seeds == 0 || ms.is_empty() {
        return Err(Error::config(
            "n, d, seeds and the landmark list must be non-empty",
        ));
    }
    if let Some(&m) = ms.iter().find(|&&m| m == 0 || m > n) {
        return Err(Error::config(format!(
            "landmark count {m} must lie in 1..={n}"
        )));
    }
    if opts.data_landmarks && ms.iter().any(|&m| m != n) {
        return Err(Error::config("data landmarks need m == n"));
    }
    let per_seed: Vec<Result<Vec<ErrorSample>>> = par::map_range(seeds, |s| {
        let mut rng = Rng::new(s as u64);
        let (q, k) = (rng.gaussian(n, d), rng.gaussian(n, d));
        let exact = softmax_scores(&q, &k)?;
        ms.iter()
            .map(|&m| {
                let landmarks = if opts.data_landmarks {
                    LandmarkSet::from_data(&q, &k)
                } else {
                    LandmarkSet::segment_means(&q, &k, m)?
                };
                let parts = nystrom_parts_with(&q, &k, &landmarks, opts.pinv_iters, opts.pinv_tol)?;
                let (rel, dev) = approximation_error(&materialize_s_hat(&parts)?, &exact)?;
                Ok(ErrorSample {
                    m,
                    seed: s as u64,
                    rel_frobenius: rel,
                    max_row_sum_dev: dev,
                    pinv_residual: parts.diagnostics.final_residual(),
                    converged: parts.diagnostics.converged,
                })
            })
            .collect()
    });
    let mut out = Vec::with_capacity(seeds * ms.len());
    for r in per_seed {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean and spread of the approximation error for each landmark count.
pub fn bench_error(
    n: usize,
    d: usize,
    ms: &[usize],
    seeds: usize,
    opts: &ErrorOptions,
) -> Result<Vec<ErrorRow>> {
    let samples = error_samples(n, d, ms, seeds, opts)?;
    Ok(ms
        .iter()
        .map(|&m| {
            let of_m: Vec<&ErrorSample> = samples.iter().filter(|s| s.m == m).collect();
            let rel: Vec<f64> = of_m.iter().map(|s| s.rel_frobenius).collect();
            let (mean, std) = mean_std(&rel);
            let count = of_m.len() as f64;
            ErrorRow {
                n,
                d,
                m,
                seeds,
                mean_rel_frobenius: mean,
                std_rel_frobenius: std,
                mean_max_row_sum_dev: of_m.iter().map(|s| s.max_row_sum_dev).sum::<f64>() / count,
                mean_pinv_residual: of_m.iter().map(|s| s.pinv_residual).sum::<f64>() / count,
                converged: of_m.iter().filter(|s| s.converged).count(),
            }
        })
        .collect())
}

/// Writes `rows` under a fixed header, even when `rows` is empty.
pub fn write_csv<W: Write, R: Serialize>(out: W, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    write_csv(std::fs::File::create(path)?, header, rows)
}

pub fn write_json_file<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, rows)?;
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}
