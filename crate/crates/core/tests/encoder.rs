use std::sync::Mutex;
use std::time::Instant;

use nystrom_core::bench::{loglog_slope, median};
use nystrom_core::encoder::{
    encoder_forward, EncoderAttention, EncoderConfig, EncoderParams, NystromSpec, ToyTask,
};
use nystrom_core::par;

/// Keeps the timing test from sharing the core with other tests in this binary.
static SERIAL: Mutex<()> = Mutex::new(());

#[test]
fn data_landmarks_match_exact_logits() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let exact_cfg = EncoderConfig {
        layers: 2,
        d_model: 8,
        d_hidden: 16,
        heads: 2,
        vocab: 6,
        n: 8,
        attention: EncoderAttention::Exact,
    };
    let ny_cfg = EncoderConfig {
        attention: EncoderAttention::Nystrom(NystromSpec {
            landmarks: 8,
            pinv_iters: 200,
            pinv_tol: 1e-10,
            data_landmarks: true,
            conv_kernel: None,
        }),
        ..exact_cfg.clone()
    };
    let task = ToyTask::new(8, 6, 11).unwrap();
    for seed in 0..5 {
        let params = EncoderParams::init(&exact_cfg, seed).unwrap();
        for sample in task.eval_set(4) {
            let a = encoder_forward(&params, &exact_cfg, &sample.tokens).unwrap();
            let b = encoder_forward(&params, &ny_cfg, &sample.tokens).unwrap();
            let d = a.max_abs_diff(&b).unwrap();
            assert!(d < 1e-4, "seed {seed}: {d}");
        }
    }
}

fn forward_ms(cfg: &EncoderConfig, reps: usize) -> f64 {
    let params = EncoderParams::init(cfg, 0).unwrap();
    let tokens: Vec<usize> = (0..cfg.n).map(|i| i % cfg.vocab).collect();
    let samples: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(encoder_forward(&params, cfg, &tokens).unwrap());
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    median(&samples)
}

#[test]
fn forward_cost_scaling() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let ns = [256usize, 512, 1024];
    let (exact, ny): (Vec<f64>, Vec<f64>) = par::with_threads(1, || {
        ns.iter()
            .map(|&n| {
                let e = EncoderConfig::small(6, n, EncoderAttention::Exact);
                let y = EncoderConfig::small(6, n, EncoderAttention::Nystrom(NystromSpec::new(16)));
                (forward_ms(&e, 5), forward_ms(&y, 5))
            })
            .unzip()
    });
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let (se, sn) = (loglog_slope(&xs, &exact), loglog_slope(&xs, &ny));
    assert!((0.8..=1.3).contains(&sn), "nystrom slope {sn} ({ny:?})");
    assert!(se >= 1.6, "exact slope {se} ({exact:?})");
}
