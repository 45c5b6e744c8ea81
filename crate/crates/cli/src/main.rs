use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use nystrom_core::bench::{
    self, ErrorOptions, Precision, ScalingOptions, BENCH_CSV_HEADER, ERROR_CSV_HEADER,
};
use nystrom_core::encoder::{
    train_with_log, EncoderAttention, EncoderConfig, NystromSpec, OptimizerKind, ToyTask,
    TrainOptions,
};
use nystrom_core::{golden, par, pinv};

#[derive(Parser)]
#[command(
    name = "nystrom",
    version,
    about = "Nyström attention benchmarks and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionArg {
    Exact,
    Nystrom,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Subcommand)]
enum Command {
    /// Time exact and Nyström attention over sequence lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [512, 1024, 2048, 4096, 8192])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        landmarks: usize,
        #[arg(long, default_value_t = 7)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        /// Also write the records as JSON next to the CSV.
        #[arg(long)]
        json: bool,
        /// Skip exact attention above this length.
        #[arg(long, default_value_t = bench::DEFAULT_EXACT_CUTOFF)]
        exact_cutoff: usize,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
        precision: PrecisionArg,
    },
    /// Approximation error of the materialized softmax matrix against exact scores.
    ApproxError {
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32, 64])]
        landmarks: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value = "err.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = pinv::DEFAULT_ITERS)]
        pinv_iters: usize,
        #[arg(long)]
        json: bool,
    },
    /// Train the toy encoder and write its evaluation trace.
    TrainToy {
        #[arg(long, value_enum, default_value_t = AttentionArg::Nystrom)]
        attention: AttentionArg,
        #[arg(long, default_value_t = 16)]
        landmarks: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "trace.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
        optimizer: OptimizerArg,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 6)]
        vocab: usize,
        #[arg(long, default_value_t = 100)]
        eval_every: usize,
        #[arg(long, default_value_t = 512)]
        eval_size: usize,
        /// Width of the depthwise value skip (Nyström only).
        #[arg(long)]
        conv_kernel: Option<usize>,
    },
    /// Check golden fixtures; exits nonzero if any case differs.
    Golden {
        #[arg(long)]
        fixtures: PathBuf,
        /// Rewrite the fixtures from the current implementation instead of checking.
        #[arg(long)]
        regenerate: bool,
    },
}

fn json_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn fmt_opt(x: Option<f64>, prec: usize) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.prec$}"))
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Bench {
            lengths,
            landmarks,
            reps,
            seed,
            out,
            json,
            exact_cutoff,
            precision,
        } => {
            let opts = ScalingOptions {
                m: landmarks,
                reps,
                seed,
                exact_cutoff,
                precision: match precision {
                    PrecisionArg::F64 => Precision::F64,
                    PrecisionArg::F32 => Precision::F32,
                },
                with_errors: true,
            };
            let recs = bench::bench_scaling(&lengths, &opts)?;
            println!(
                "{:<8} {:>6} {:>4} {:>12} {:>14} {:>12} {:>12}",
                "scheme", "n", "m", "median_ms", "bytes", "rel_frob", "row_dev"
            );
            for r in &recs {
                println!(
                    "{:<8} {:>6} {:>4} {:>12} {:>14} {:>12} {:>12}",
                    format!("{:?}", r.scheme).to_lowercase(),
                    r.n,
                    r.m,
                    if r.skipped {
                        "skipped".into()
                    } else {
                        fmt_opt(r.median_ms, 3)
                    },
                    r.peak_bytes,
                    fmt_opt(r.rel_frobenius, 4),
                    fmt_opt(r.max_row_sum_dev, 2),
                );
            }
            bench::write_csv_file(&out, &BENCH_CSV_HEADER, &recs)
                .with_context(|| format!("writing {}", out.display()))?;
            if json {
                bench::write_json_file(&json_path(&out), &recs)?;
            }
        }
        Command::ApproxError {
            n,
            d,
            landmarks,
            seeds,
            out,
            pinv_iters,
            json,
        } => {
            let opts = ErrorOptions {
                pinv_iters,
                ..ErrorOptions::default()
            };
            let rows = bench::bench_error(n, d, &landmarks, seeds, &opts)?;
            println!(
                "{:>4} {:>12} {:>12} {:>12} {:>12}",
                "m", "mean_err", "std_err", "row_dev", "pinv_res"
            );
            for r in &rows {
                println!(
                    "{:>4} {:>12.6} {:>12.6} {:>12.3e} {:>12.3e}",
                    r.m,
                    r.mean_rel_frobenius,
                    r.std_rel_frobenius,
                    r.mean_max_row_sum_dev,
                    r.mean_pinv_residual
                );
            }
            bench::write_csv_file(&out, &ERROR_CSV_HEADER, &rows)
                .with_context(|| format!("writing {}", out.display()))?;
            if json {
                bench::write_json_file(&json_path(&out), &rows)?;
            }
        }
        Command::TrainToy {
            attention,
            landmarks,
            steps,
            seed,
            out,
            lr,
            batch,
            optimizer,
            seq_len,
            vocab,
            eval_every,
            eval_size,
            conv_kernel,
        } => {
            let attention = match attention {
                AttentionArg::Exact => EncoderAttention::Exact,
                AttentionArg::Nystrom => EncoderAttention::Nystrom(NystromSpec {
                    conv_kernel,
                    ..NystromSpec::new(landmarks)
                }),
            };
            let cfg = EncoderConfig::small(vocab, seq_len, attention);
            let task = ToyTask::new(seq_len, vocab, seed)?;
            let opts = TrainOptions {
                steps,
                lr,
                batch_size: batch,
                optimizer: match optimizer {
                    OptimizerArg::Adam => OptimizerKind::Adam,
                    OptimizerArg::Sgd => OptimizerKind::Sgd,
                },
                eval_every,
                eval_size,
                seed,
                ..TrainOptions::default()
            };
            let trace = train_with_log(&task, &cfg, &opts, |r| {
                println!(
                    "step {:>5}  loss {:.4}  acc {:.4}  {:>9.0} ms",
                    r.step, r.loss, r.eval_accuracy, r.wall_ms
                );
            })?;
            trace
                .write_csv(&out)
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Golden {
            fixtures,
            regenerate,
        } => {
            if regenerate {
                std::fs::create_dir_all(&fixtures)?;
                let manifest = golden::generate(&fixtures)?;
                println!(
                    "wrote {} cases to {}",
                    manifest.cases.len(),
                    fixtures.display()
                );
                return Ok(ExitCode::SUCCESS);
            }
            let reports = golden::check(&fixtures)
                .with_context(|| format!("reading fixtures from {}", fixtures.display()))?;
            if reports.is_empty() {
                bail!("no golden cases in {}", fixtures.display());
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            for r in &reports {
                let status = if r.passed { "ok  " } else { "FAIL" };
                match &r.detail {
                    Some(d) => println!("{status} {:<28} {:<22} {d}", r.name, r.op),
                    None => println!(
                        "{status} {:<28} {:<22} max diff {:e}",
                        r.name, r.op, r.max_diff
                    ),
                }
            }
            println!("{} cases, {} failed", reports.len(), failed);
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = par::threads_from_env();
    match par::with_threads(threads, || run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
