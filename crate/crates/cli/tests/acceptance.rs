//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to the
//! real stdout (bypassing capture) and then asserts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use nystrom_core::attention::{
    materialize_s_hat, nystrom_parts, nystrom_parts_with, softmax_scores, LandmarkSet,
};
use nystrom_core::autodiff::{self, Graph};
use nystrom_core::bench::{
    self, exact_bytes, loglog_slope, nystrom_bytes, ErrorOptions, Precision, ScalingOptions, Scheme,
};
use nystrom_core::encoder::{
    train, EncoderAttention, EncoderConfig, NystromSpec, ToyTask, TrainOptions,
};
use nystrom_core::linalg::{gauss_jordan_inverse, norm_inf, rowwise_softmax};
use nystrom_core::pinv::{pinv_iterate, DEFAULT_ITERS, DEFAULT_TOL};
use nystrom_core::rng::Rng;
use nystrom_core::{golden, Matrix};

/// Criteria run one at a time so timings do not overlap.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(id: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id}: {status}  {detail}");
    let _ = out.flush();
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn softmax_gaussian(seed: u64, m: usize) -> Matrix {
    rowwise_softmax(&Rng::derive(seed, m as u64).gaussian(m, m))
}

/// The 150 instances shared by criteria 2 and 3.
fn pinv_instances() -> Vec<Matrix> {
    [8usize, 16, 64]
        .iter()
        .flat_map(|&m| (0..50).map(move |s| softmax_gaussian(s, m)))
        .collect()
}

#[test]
fn criterion_1_data_landmarks_exactness() {
    let _g = serial();
    let mut worst = 0.0f64;
    let mut unconverged = 0;
    for &n in &[4usize, 16, 64] {
        for seed in 0..10 {
            let mut rng = Rng::derive(100 + seed, n as u64);
            let (q, k) = (rng.gaussian(n, 8), rng.gaussian(n, 8));
            let parts =
                nystrom_parts_with(&q, &k, &LandmarkSet::from_data(&q, &k), 500, 1e-8).unwrap();
            if parts.diagnostics.final_residual() >= 1e-8 {
                unconverged += 1;
            }
            let s_hat = materialize_s_hat(&parts).unwrap();
            let s = softmax_scores(&q, &k).unwrap();
            worst = worst.max(norm_inf(&s_hat.sub(&s).unwrap()));
        }
    }
    let passed = worst < 1e-5 && unconverged == 0;
    report(
        "1",
        passed,
        &format!(
            "max ||S_hat - S||_inf = {worst:.3e} (< 1e-5), unconverged pinv = {unconverged}/30"
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_2_pinv_oracle_and_default_iterations() {
    let _g = serial();
    let instances = pinv_instances();
    let mut worst = 0.0f64;
    let mut default_ok = 0;
    for a in &instances {
        let converged = pinv_iterate(a, 100, 1e-12).unwrap();
        let oracle = gauss_jordan_inverse(a).unwrap();
        worst = worst.max(norm_inf(&converged.z_star.sub(&oracle).unwrap()));
        if pinv_iterate(a, DEFAULT_ITERS, DEFAULT_TOL)
            .unwrap()
            .final_residual()
            < 1e-6
        {
            default_ok += 1;
        }
    }
    let total = instances.len();
    let frac = default_ok as f64 / total as f64;
    let oracle_ok = worst < 1e-6;
    let passed = oracle_ok && frac >= 0.9;
    report(
        "2",
        passed,
        &format!(
            "oracle max diff {worst:.3e} (< 1e-6: {oracle_ok}); {DEFAULT_ITERS}-step residual < 1e-6 on {default_ok}/{total} = {:.1}% (need >= 90%)",
            100.0 * frac
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_3_convergence_order() {
    let _g = serial();
    let mut violations = 0;
    let mut checked = 0;
    for a in &pinv_instances() {
        let run = pinv_iterate(a, 100, 1e-12).unwrap();
        let tr = &run.residual_trace;
        let m = a.rows() as f64;
        for j in 0..tr.len() - 1 {
            if tr[j] >= 0.5 {
                continue;
            }
            let z_j = if j == 0 {
                nystrom_core::pinv::pinv_init(a).unwrap()
            } else {
                pinv_iterate(a, j, f64::MIN_POSITIVE).unwrap().z_star
            };
            let floor = m * f64::EPSILON * norm_inf(a) * norm_inf(&z_j);
            checked += 1;
            if tr[j + 1] > (tr[j] * tr[j]).max(floor) {
                violations += 1;
            }
        }
    }
    let passed = violations == 0 && checked > 0;
    report(
        "3",
        passed,
        &format!("r_(j+1) <= max(r_j^2, rounding floor) violated {violations}/{checked} steps"),
    );
    assert!(passed);
}

#[test]
fn criterion_4_row_stochasticity() {
    let _g = serial();
    let (n, m) = (256, 32);
    let mut exact_dev = 0.0f64;
    let mut approx_dev = 0.0f64;
    let mut converged = 0;
    for seed in 0..50 {
        let mut rng = Rng::derive(400 + seed, 0);
        let (q, k) = (rng.gaussian(n, 64), rng.gaussian(n, 64));
        exact_dev = exact_dev.max(bench::max_row_sum_dev(&softmax_scores(&q, &k).unwrap()));
        let landmarks = LandmarkSet::segment_means(&q, &k, m).unwrap();
        let parts = nystrom_parts_with(&q, &k, &landmarks, 100, 1e-6).unwrap();
        if parts.diagnostics.converged {
            converged += 1;
            approx_dev =
                approx_dev.max(bench::max_row_sum_dev(&materialize_s_hat(&parts).unwrap()));
        }
    }
    let passed = exact_dev <= 1e-12 && approx_dev <= 1e-4 && converged > 0;
    report(
        "4",
        passed,
        &format!(
            "exact max row-sum dev {exact_dev:.2e} (<= 1e-12); approx {approx_dev:.2e} (<= 1e-4) over {converged}/50 converged"
        ),
    );
    assert!(passed);
}

fn nystrom_loss(q: &Matrix, k: &Matrix, v: &Matrix, w: &Matrix) -> f64 {
    let out = nystrom_parts(q, k, 4, DEFAULT_ITERS)
        .unwrap()
        .apply(v)
        .unwrap();
    out.hadamard(w).unwrap().sum()
}

#[test]
fn criterion_5_gradient_fidelity() {
    let _g = serial();
    let (n, d, m, h) = (16, 4, 4, 1e-5);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..5 {
        let mut rng = Rng::derive(500 + seed, 0);
        let inputs = [rng.gaussian(n, d), rng.gaussian(n, d), rng.gaussian(n, d)];
        let w = rng.gaussian(n, d);
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let ny = autodiff::nystrom_attention(
            &mut g,
            ids[0],
            ids[1],
            ids[2],
            m,
            None,
            DEFAULT_ITERS,
            DEFAULT_TOL,
        )
        .unwrap();
        let grads = g.backward(ny.out, &w).unwrap();
        for (slot, &id) in ids.iter().enumerate() {
            let analytic = grads.wrt(id);
            for idx in 0..n * d {
                let an = analytic.as_slice()[idx];
                if an.abs() <= 1e-8 {
                    continue;
                }
                let mut plus = inputs.clone();
                plus[slot].as_mut_slice()[idx] += h;
                let mut minus = inputs.clone();
                minus[slot].as_mut_slice()[idx] -= h;
                let fd = (nystrom_loss(&plus[0], &plus[1], &plus[2], &w)
                    - nystrom_loss(&minus[0], &minus[1], &minus[2], &w))
                    / (2.0 * h);
                worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()));
                checked += 1;
            }
        }
    }
    let passed = worst <= 1e-4;
    report(
        "5",
        passed,
        &format!("max relative FD error {worst:.2e} (<= 1e-4) over {checked} coordinates"),
    );
    assert!(passed);
}

#[test]
fn criterion_6_error_vs_landmarks() {
    let _g = serial();
    let ms = [8usize, 16, 32, 64];
    let rows = bench::bench_error(256, 64, &ms, 20, &ErrorOptions::default()).unwrap();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_rel_frobenius).collect();
    let passed = means.windows(2).all(|w| w[1] <= w[0]);
    report(
        "6",
        passed,
        &format!("mean relative Frobenius error over m = {ms:?}: {means:.4?} (non-increasing)"),
    );
    assert!(passed);
}

#[test]
fn criterion_7_linear_scaling() {
    let _g = serial();
    let ns = [512usize, 1024, 2048, 4096];
    let opts = ScalingOptions {
        m: 64,
        reps: 7,
        seed: 0,
        exact_cutoff: 2048,
        precision: Precision::F64,
        with_errors: false,
    };
    let recs = bench::bench_scaling(&ns, &opts).unwrap();
    let times = |scheme: Scheme| -> (Vec<f64>, Vec<f64>) {
        recs.iter()
            .filter(|r| r.scheme == scheme && !r.skipped)
            .map(|r| (r.n as f64, r.median_ms.unwrap()))
            .unzip()
    };
    let (nx, nt) = times(Scheme::Nystrom);
    let (ex, et) = times(Scheme::Exact);
    let ny_slope = loglog_slope(&nx, &nt);
    let ex_slope = loglog_slope(&ex, &et);
    let ratio = exact_bytes(8192, Precision::F64) as f64
        / nystrom_bytes(8192, 64, 64, 64, Precision::F64) as f64;
    let passed = (0.8..=1.3).contains(&ny_slope) && ex_slope >= 1.6 && ratio >= 10.0;
    report(
        "7",
        passed,
        &format!(
            "nystrom slope {ny_slope:.3} in [0.8, 1.3] ({nt:.2?} ms); exact slope {ex_slope:.3} >= 1.6 ({et:.2?} ms); memory ratio at n=8192 {ratio:.1}x >= 10"
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_8_trainability() {
    let _g = serial();
    let (n, vocab, seed) = (32, 6, 0);
    let task = ToyTask::new(n, vocab, seed).unwrap();
    let opts = TrainOptions {
        seed,
        ..TrainOptions::default()
    };
    let exact = train(
        &task,
        &EncoderConfig::small(vocab, n, EncoderAttention::Exact),
        &opts,
    )
    .unwrap();
    let ny_cfg = EncoderConfig::small(vocab, n, EncoderAttention::Nystrom(NystromSpec::new(16)));
    let ny = train(&task, &ny_cfg, &opts).unwrap();
    let (ea, na) = (exact.final_accuracy(), ny.final_accuracy());
    let passed = ea >= 0.9 && (ea - na).abs() <= 0.05;
    report(
        "8",
        passed,
        &format!(
            "held-out accuracy exact {:.1}% (>= 90%), nystrom(m=16) {:.1}% (within 5 points), {} steps",
            100.0 * ea,
            100.0 * na,
            opts.steps
        ),
    );
    assert!(passed);
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

#[test]
fn criterion_9_golden_determinism() {
    let _g = serial();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let manifest = golden::generate(first.path()).unwrap();
    golden::generate(second.path()).unwrap();
    let identical = manifest.cases.iter().all(|case| {
        case.inputs.iter().chain(&case.outputs).all(|slot| {
            let rel = Path::new(&case.name).join(format!("{slot}.txt"));
            std::fs::read(first.path().join(&rel)).unwrap()
                == std::fs::read(second.path().join(&rel)).unwrap()
        })
    });
    let ops: std::collections::BTreeSet<&str> =
        manifest.cases.iter().map(|c| c.op.as_str()).collect();
    let status = Command::new(env!("CARGO_BIN_EXE_nystrom"))
        .args(["golden", "--fixtures"])
        .arg(fixtures())
        .output()
        .unwrap();
    let passed = identical && manifest.cases.len() >= 12 && status.status.success();
    report(
        "9",
        passed,
        &format!(
            "{} cases over {} ops, consecutive runs bit-identical: {identical}; `golden` exit {:?}",
            manifest.cases.len(),
            ops.len(),
            status.status.code()
        ),
    );
    assert!(passed, "{}", String::from_utf8_lossy(&status.stdout));
}
