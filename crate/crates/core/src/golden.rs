//! Golden fixtures: stored inputs and expected outputs for every public
//! operation, checked by recomputation.
//!
//! A fixture directory holds `manifest.json` and one text matrix file per
//! input and output slot under `<case>/<slot>.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attention::{
    depthwise_conv_skip, exact_attention, materialize_s_hat, multihead_nystrom, nystrom_attention,
    nystrom_parts, project_qkv, segment_means, AttentionConfig, HeadWeights, MultiHeadWeights,
};
use crate::autodiff::{self, softmax_backward, Graph};
use crate::bench::{self, ErrorOptions, ScalingOptions};
use crate::encoder::{
    encoder_forward, train, EncoderAttention, EncoderConfig, EncoderParams, NystromSpec, ToyTask,
    TrainOptions,
};
use crate::error::{Error, Result};
use crate::linalg::{self, text, Matrix};
use crate::pinv;
use crate::rng::Rng;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub name: String,
    pub op: String,
    #[serde(default)]
    pub params: Value,
    /// Input slot names in argument order.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Largest allowed absolute difference per entry; zero means bit-identical.
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<Case>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub op: String,
    pub passed: bool,
    /// Largest absolute difference over all outputs; infinite on shape mismatch.
    pub max_diff: f64,
    pub detail: Option<String>,
}

fn slot_path(dir: &Path, case: &str, slot: &str) -> PathBuf {
    dir.join(case).join(format!("{slot}.txt"))
}

fn usize_param(p: &Value, key: &str) -> Result<usize> {
    p.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::Golden(format!("missing integer parameter `{key}`")))
}

fn f64_param(p: &Value, key: &str) -> Result<f64> {
    p.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::Golden(format!("missing real parameter `{key}`")))
}

fn list_param(p: &Value, key: &str) -> Result<Vec<usize>> {
    p.get(key)
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(|v| v.as_u64().map(|x| x as usize)).collect())
        .ok_or_else(|| Error::Golden(format!("missing list parameter `{key}`")))
}

fn scalar(x: f64) -> Matrix {
    Matrix::filled(1, 1, x)
}

fn tokens_of(m: &Matrix) -> Vec<usize> {
    m.as_slice().iter().map(|&t| t as usize).collect()
}

fn tiny_encoder(p: &Value) -> Result<EncoderConfig> {
    let attention = match p.get("landmarks").and_then(Value::as_u64) {
        Some(m) => EncoderAttention::Nystrom(NystromSpec::new(m as usize)),
        None => EncoderAttention::Exact,
    };
    Ok(EncoderConfig {
        layers: usize_param(p, "layers")?,
        d_model: usize_param(p, "d_model")?,
        d_hidden: usize_param(p, "d_hidden")?,
        heads: usize_param(p, "heads")?,
        vocab: usize_param(p, "vocab")?,
        n: usize_param(p, "n")?,
        attention,
    })
}

/// Evaluates `op` on `inputs`, returning outputs in slot order.
pub fn run_op(op: &str, p: &Value, inputs: &[Matrix]) -> Result<Vec<Matrix>> {
    let arg = |i: usize| {
        inputs
            .get(i)
            .ok_or_else(|| Error::Golden(format!("`{op}` needs input {i}")))
    };
    Ok(match op {
        "matmul" => vec![linalg::matmul(arg(0)?, arg(1)?)?],
        "rowwise_softmax" => vec![linalg::rowwise_softmax(arg(0)?)],
        "norms" => vec![
            scalar(linalg::norm_1(arg(0)?)),
            scalar(linalg::norm_inf(arg(0)?)),
        ],
        "gauss_jordan_inverse" => vec![linalg::gauss_jordan_inverse(arg(0)?)?],
        "pinv_init" => vec![pinv::pinv_init(arg(0)?)?],
        "pinv_iterate" => {
            let r =
                pinv::pinv_iterate(arg(0)?, usize_param(p, "max_iters")?, f64_param(p, "tol")?)?;
            vec![
                r.z_star,
                Matrix::column(&r.residual_trace),
                Matrix::from_rows(&[[r.iterations_run as f64, f64::from(u8::from(r.converged))]])?,
            ]
        }
        "project_qkv" => {
            let (q, k, v) = project_qkv(arg(0)?, arg(1)?, arg(2)?, arg(3)?)?;
            vec![q, k, v]
        }
        "exact_attention" => vec![exact_attention(arg(0)?, arg(1)?, arg(2)?)?],
        "segment_means" => vec![segment_means(arg(0)?, usize_param(p, "m")?)?],
        "nystrom_parts" => {
            let parts = nystrom_parts(
                arg(0)?,
                arg(1)?,
                usize_param(p, "m")?,
                usize_param(p, "pinv_iters")?,
            )?;
            vec![parts.f_tilde, parts.a_pinv, parts.b_tilde]
        }
        "nystrom_attention" => {
            let (q, k, v) = (arg(0)?, arg(1)?, arg(2)?);
            let cfg = AttentionConfig::new(q.rows(), q.cols(), 1, usize_param(p, "m")?)?
                .with_pinv(usize_param(p, "pinv_iters")?, f64_param(p, "pinv_tol")?)?;
            vec![nystrom_attention(q, k, v, &cfg)?]
        }
        "materialize_s_hat" => {
            let parts = nystrom_parts(
                arg(0)?,
                arg(1)?,
                usize_param(p, "m")?,
                usize_param(p, "pinv_iters")?,
            )?;
            vec![materialize_s_hat(&parts)?]
        }
        "depthwise_conv_skip" => vec![depthwise_conv_skip(arg(0)?, arg(1)?)?],
        "multihead_nystrom" => {
            let heads = usize_param(p, "heads")?;
            let x = arg(0)?;
            let cfg = AttentionConfig::new(x.rows(), x.cols(), heads, usize_param(p, "m")?)?
                .with_skip(usize_param(p, "conv_kernel")?)?;
            let weights = MultiHeadWeights {
                heads: (0..heads)
                    .map(|h| {
                        Ok(HeadWeights {
                            w_q: arg(1 + 4 * h)?.clone(),
                            w_k: arg(2 + 4 * h)?.clone(),
                            w_v: arg(3 + 4 * h)?.clone(),
                            conv: arg(4 + 4 * h)?.clone(),
                        })
                    })
                    .collect::<Result<_>>()?,
                w_o: arg(1 + 4 * heads)?.clone(),
            };
            vec![multihead_nystrom(x, &weights, &cfg)?]
        }
        "backward" => {
            let mut g = Graph::new();
            let (q, k, v) = (
                g.leaf(arg(0)?.clone()),
                g.leaf(arg(1)?.clone()),
                g.leaf(arg(2)?.clone()),
            );
            let ny = autodiff::nystrom_attention(
                &mut g,
                q,
                k,
                v,
                usize_param(p, "m")?,
                None,
                usize_param(p, "pinv_iters")?,
                pinv::DEFAULT_TOL,
            )?;
            let grads = g.backward(ny.out, arg(3)?)?;
            vec![grads.wrt(q), grads.wrt(k), grads.wrt(v)]
        }
        "softmax_backward" => vec![softmax_backward(arg(0)?, arg(1)?)?],
        "encoder_forward" => {
            let cfg = tiny_encoder(p)?;
            let params = EncoderParams::init(&cfg, usize_param(p, "seed")? as u64)?;
            vec![encoder_forward(&params, &cfg, &tokens_of(arg(0)?))?]
        }
        "train" => {
            let cfg = tiny_encoder(p)?;
            let seed = usize_param(p, "seed")? as u64;
            let task = ToyTask::new(cfg.n, cfg.vocab, seed)?;
            let opts = TrainOptions {
                steps: usize_param(p, "steps")?,
                lr: f64_param(p, "lr")?,
                batch_size: usize_param(p, "batch_size")?,
                eval_every: usize_param(p, "eval_every")?,
                eval_size: usize_param(p, "eval_size")?,
                seed,
                ..TrainOptions::default()
            };
            let trace = train(&task, &cfg, &opts)?;
            let rows: Vec<[f64; 3]> = trace
                .rows
                .iter()
                .map(|r| [r.step as f64, r.loss, r.eval_accuracy])
                .collect();
            vec![Matrix::from_rows(&rows)?]
        }
        "bench_scaling" => {
            let opts = ScalingOptions {
                m: usize_param(p, "m")?,
                reps: usize_param(p, "reps")?,
                seed: usize_param(p, "seed")? as u64,
                ..ScalingOptions::default()
            };
            let recs = bench::bench_scaling(&list_param(p, "lengths")?, &opts)?;
            let rows: Vec<[f64; 4]> = recs
                .iter()
                .map(|r| {
                    [
                        r.n as f64,
                        r.peak_bytes as f64,
                        r.rel_frobenius.unwrap_or(f64::NAN),
                        r.max_row_sum_dev.unwrap_or(f64::NAN),
                    ]
                })
                .collect();
            vec![Matrix::from_rows(&rows)?]
        }
        "bench_error" => {
            let rows = bench::bench_error(
                usize_param(p, "n")?,
                usize_param(p, "d")?,
                &list_param(p, "landmarks")?,
                usize_param(p, "seeds")?,
                &ErrorOptions::default(),
            )?;
            let rows: Vec<[f64; 5]> = rows
                .iter()
                .map(|r| {
                    [
                        r.m as f64,
                        r.mean_rel_frobenius,
                        r.std_rel_frobenius,
                        r.mean_max_row_sum_dev,
                        r.mean_pinv_residual,
                    ]
                })
                .collect();
            vec![Matrix::from_rows(&rows)?]
        }
        other => return Err(Error::Golden(format!("unknown op `{other}`"))),
    })
}

struct Spec {
    name: &'static str,
    op: &'static str,
    params: Value,
    inputs: Vec<(String, Matrix)>,
    outputs: &'static [&'static str],
}

fn named(pairs: Vec<(&str, Matrix)>) -> Vec<(String, Matrix)> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn specs() -> Vec<Spec> {
    let mut rng = Rng::new(20240);
    let softmax_sq = |rng: &mut Rng, m: usize| linalg::rowwise_softmax(&rng.gaussian(m, m));
    let mut out = vec![
        Spec {
            name: "matmul_5x7x3",
            op: "matmul",
            params: json!({}),
            inputs: named(vec![("a", rng.gaussian(5, 7)), ("b", rng.gaussian(7, 3))]),
            outputs: &["out"],
        },
        Spec {
            name: "softmax_wide_range",
            op: "rowwise_softmax",
            params: json!({}),
            inputs: named(vec![("m", rng.gaussian_scaled(4, 9, 30.0))]),
            outputs: &["out"],
        },
        Spec {
            name: "norms_6x4",
            op: "norms",
            params: json!({}),
            inputs: named(vec![("m", rng.gaussian(6, 4))]),
            outputs: &["norm_1", "norm_inf"],
        },
        Spec {
            name: "gauss_jordan_softmax_8",
            op: "gauss_jordan_inverse",
            params: json!({}),
            inputs: named(vec![("a", softmax_sq(&mut rng, 8))]),
            outputs: &["inverse"],
        },
        Spec {
            name: "pinv_init_8",
            op: "pinv_init",
            params: json!({}),
            inputs: named(vec![("a", softmax_sq(&mut rng, 8))]),
            outputs: &["z0"],
        },
        Spec {
            name: "pinv_iterate_16",
            op: "pinv_iterate",
            params: json!({"max_iters": 30, "tol": 1e-10}),
            inputs: named(vec![("a", softmax_sq(&mut rng, 16))]),
            outputs: &["z_star", "residual_trace", "status"],
        },
    ];
    let (x, wq, wk, wv) = (
        rng.gaussian(12, 8),
        rng.gaussian(8, 4),
        rng.gaussian(8, 4),
        rng.gaussian(8, 4),
    );
    out.push(Spec {
        name: "project_qkv_12x8",
        op: "project_qkv",
        params: json!({}),
        inputs: named(vec![("x", x), ("w_q", wq), ("w_k", wk), ("w_v", wv)]),
        outputs: &["q", "k", "v"],
    });
    let qkv = |rng: &mut Rng, n: usize, d: usize| {
        named(vec![
            ("q", rng.gaussian(n, d)),
            ("k", rng.gaussian(n, d)),
            ("v", rng.gaussian(n, d)),
        ])
    };
    out.push(Spec {
        name: "exact_attention_16x8",
        op: "exact_attention",
        params: json!({}),
        inputs: qkv(&mut rng, 16, 8),
        outputs: &["out"],
    });
    out.push(Spec {
        name: "segment_means_padded",
        op: "segment_means",
        params: json!({"m": 4}),
        inputs: named(vec![("x", rng.gaussian(10, 3))]),
        outputs: &["out"],
    });
    let mut qk = qkv(&mut rng, 32, 8);
    qk.truncate(2);
    out.push(Spec {
        name: "nystrom_parts_32_m8",
        op: "nystrom_parts",
        params: json!({"m": 8, "pinv_iters": 6}),
        inputs: qk.clone(),
        outputs: &["f_tilde", "a_pinv", "b_tilde"],
    });
    out.push(Spec {
        name: "materialize_s_hat_32_m8",
        op: "materialize_s_hat",
        params: json!({"m": 8, "pinv_iters": 6}),
        inputs: qk,
        outputs: &["s_hat"],
    });
    out.push(Spec {
        name: "nystrom_attention_64_m16",
        op: "nystrom_attention",
        params: json!({"m": 16, "pinv_iters": 6, "pinv_tol": 1e-6}),
        inputs: qkv(&mut rng, 64, 16),
        outputs: &["out"],
    });
    out.push(Spec {
        name: "depthwise_conv_w5",
        op: "depthwise_conv_skip",
        params: json!({}),
        inputs: named(vec![
            ("v", rng.gaussian(9, 3)),
            ("kernels", rng.gaussian(3, 5)),
        ]),
        outputs: &["out"],
    });
    let mut mh = vec![("x".to_string(), rng.gaussian(16, 8))];
    for h in 0..2 {
        for slot in ["w_q", "w_k", "w_v"] {
            mh.push((format!("h{h}_{slot}"), rng.gaussian_scaled(8, 4, 0.35)));
        }
        mh.push((format!("h{h}_conv"), rng.gaussian_scaled(4, 3, 0.5)));
    }
    mh.push(("w_o".to_string(), rng.gaussian_scaled(8, 8, 0.35)));
    out.push(Spec {
        name: "multihead_nystrom_2x4",
        op: "multihead_nystrom",
        params: json!({"heads": 2, "m": 4, "conv_kernel": 3}),
        inputs: mh,
        outputs: &["out"],
    });
    let mut bw = qkv(&mut rng, 16, 4);
    bw.push(("seed".to_string(), rng.gaussian(16, 4)));
    out.push(Spec {
        name: "backward_nystrom_16",
        op: "backward",
        params: json!({"m": 4, "pinv_iters": 6}),
        inputs: bw,
        outputs: &["d_q", "d_k", "d_v"],
    });
    out.push(Spec {
        name: "softmax_backward_5x6",
        op: "softmax_backward",
        params: json!({}),
        inputs: named(vec![
            ("rows", linalg::rowwise_softmax(&rng.gaussian(5, 6))),
            ("upstream", rng.gaussian(5, 6)),
        ]),
        outputs: &["out"],
    });
    let encoder = json!({"layers": 2, "d_model": 8, "d_hidden": 16, "heads": 2, "vocab": 6, "n": 16, "landmarks": 4, "seed": 5});
    let task = ToyTask::new(16, 6, 5).expect("valid toy task");
    let tokens: Vec<f64> = task.eval_set(1)[0]
        .tokens
        .iter()
        .map(|&t| t as f64)
        .collect();
    out.push(Spec {
        name: "encoder_forward_nystrom",
        op: "encoder_forward",
        params: encoder,
        inputs: named(vec![("tokens", Matrix::column(&tokens))]),
        outputs: &["logits"],
    });
    out.push(Spec {
        name: "train_exact_4_steps",
        op: "train",
        params: json!({"layers": 1, "d_model": 8, "d_hidden": 8, "heads": 2, "vocab": 6, "n": 8,
                       "seed": 3, "steps": 4, "lr": 1e-2, "batch_size": 4, "eval_every": 2, "eval_size": 16}),
        inputs: vec![],
        outputs: &["trace"],
    });
    out.push(Spec {
        name: "bench_scaling_errors",
        op: "bench_scaling",
        params: json!({"lengths": [64, 128], "m": 8, "reps": 5, "seed": 0}),
        inputs: vec![],
        outputs: &["records"],
    });
    out.push(Spec {
        name: "bench_error_64",
        op: "bench_error",
        params: json!({"n": 64, "d": 16, "landmarks": [4, 8, 16], "seeds": 3}),
        inputs: vec![],
        outputs: &["table"],
    });
    out
}

/// Writes inputs, expected outputs and the manifest into `dir`.
pub fn generate(dir: &Path) -> Result<Manifest> {
    let mut cases = Vec::new();
    for spec in specs() {
        let mats: Vec<Matrix> = spec.inputs.iter().map(|(_, m)| m.clone()).collect();
        let outputs = run_op(spec.op, &spec.params, &mats)?;
        if outputs.len() != spec.outputs.len() {
            return Err(Error::Golden(format!(
                "{}: {} outputs for {} slots",
                spec.name,
                outputs.len(),
                spec.outputs.len()
            )));
        }
        fs::create_dir_all(dir.join(spec.name))?;
        for (slot, m) in &spec.inputs {
            text::write(&slot_path(dir, spec.name, slot), m)?;
        }
        for (slot, m) in spec.outputs.iter().zip(&outputs) {
            text::write(&slot_path(dir, spec.name, slot), m)?;
        }
        cases.push(Case {
            name: spec.name.to_string(),
            op: spec.op.to_string(),
            params: spec.params,
            inputs: spec.inputs.into_iter().map(|(s, _)| s).collect(),
            outputs: spec.outputs.iter().map(|s| s.to_string()).collect(),
            tolerance: 0.0,
        });
    }
    let manifest = Manifest { cases };
    fs::write(
        dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(
        dir.join(MANIFEST),
    )?)?)
}

/// Entrywise comparison treating two NaNs as equal.
fn max_diff(expected: &Matrix, actual: &Matrix) -> Option<f64> {
    if expected.shape() != actual.shape() {
        return None;
    }
    let mut worst = 0.0f64;
    for (&e, &a) in expected.as_slice().iter().zip(actual.as_slice()) {
        let d = if (e.is_nan() && a.is_nan()) || e.to_bits() == a.to_bits() {
            0.0
        } else {
            let d = (e - a).abs();
            if d.is_nan() {
                f64::INFINITY
            } else {
                d.max(f64::MIN_POSITIVE)
            }
        };
        worst = worst.max(d);
    }
    Some(worst)
}

fn check_case(dir: &Path, case: &Case) -> Result<CaseReport> {
    let inputs = case
        .inputs
        .iter()
        .map(|s| text::read(&slot_path(dir, &case.name, s)))
        .collect::<Result<Vec<_>>>()?;
    let actual = run_op(&case.op, &case.params, &inputs)?;
    if actual.len() != case.outputs.len() {
        return Err(Error::Golden(format!(
            "{} produced {} outputs, manifest lists {}",
            case.name,
            actual.len(),
            case.outputs.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut detail = None;
    for (slot, got) in case.outputs.iter().zip(&actual) {
        let want = text::read(&slot_path(dir, &case.name, slot))?;
        match max_diff(&want, got) {
            Some(d) => {
                if d > case.tolerance && detail.is_none() {
                    detail = Some(format!("{slot}: max difference {d:e}"));
                }
                worst = worst.max(d);
            }
            None => {
                detail = Some(format!(
                    "{slot}: shape {:?} != expected {:?}",
                    got.shape(),
                    want.shape()
                ));
                worst = f64::INFINITY;
            }
        }
    }
    Ok(CaseReport {
        name: case.name.clone(),
        op: case.op.clone(),
        passed: detail.is_none(),
        max_diff: worst,
        detail,
    })
}

/// Recomputes every case in `dir`. Errors while evaluating a case are
/// reported as failures of that case.
pub fn check(dir: &Path) -> Result<Vec<CaseReport>> {
    let manifest = load_manifest(dir)?;
    Ok(manifest
        .cases
        .iter()
        .map(|case| {
            check_case(dir, case).unwrap_or_else(|e| CaseReport {
                name: case.name.clone(),
                op: case.op.clone(),
                passed: false,
                max_diff: f64::INFINITY,
                detail: Some(e.to_string()),
            })
        })
        .collect())
}
