//! Mini-batch training with gradient-norm clipping.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::task::{Sample, ToyTask};
use super::{build_graph, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::par;

pub trait Optimizer {
    /// Applies one update. `grads[i]` matches `params[i]` in shape.
    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]);
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *w -= self.lr * d;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        if self.m.is_empty() {
            self.m = grads
                .iter()
                .map(|g| vec![0.0; g.as_slice().len()])
                .collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &d)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
            OptimizerKind::Sgd => Box::new(Sgd { lr }),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
    pub eval_every: usize,
    pub eval_size: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            lr: 1e-3,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            clip_norm: 1.0,
            eval_every: 100,
            eval_size: 512,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Mean cross-entropy on the held-out set.
    pub loss: f64,
    pub eval_accuracy: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub params: EncoderParams,
}

impl TrainTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.eval_accuracy)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_trace(std::fs::File::create(path)?, &self.rows)
    }
}

fn label_loss(logits: &Matrix, label: usize) -> f64 {
    let row = logits.row(0);
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - row[label]
}

/// Mean loss and accuracy over `samples`.
pub fn evaluate(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    samples: &[Sample],
) -> Result<(f64, f64)> {
    let per: Vec<Result<(f64, bool)>> = par::map_range(samples.len(), |i| {
        let s = &samples[i];
        let eg = build_graph(params, cfg, &s.tokens)?;
        let logits = eg.graph.value(eg.logits);
        let pred = usize::from(logits[(0, 1)] > logits[(0, 0)]);
        Ok((label_loss(logits, s.label), pred == s.label))
    });
    let (mut loss, mut correct) = (0.0, 0usize);
    for r in per {
        let (l, ok) = r?;
        loss += l;
        correct += usize::from(ok);
    }
    let count = samples.len().max(1) as f64;
    Ok((loss / count, correct as f64 / count))
}

/// Mean loss and its gradient with respect to every tensor in
/// [`EncoderParams::tensors`] order. Per-sample gradients are summed in sample
/// order, so the result does not depend on the thread count.
pub fn batch_gradients(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    batch: &[Sample],
) -> Result<(f64, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let per: Vec<Result<(f64, Vec<Matrix>)>> = par::map_range(batch.len(), |i| {
        let s = &batch[i];
        let mut eg = build_graph(params, cfg, &s.tokens)?;
        let loss = eg.graph.cross_entropy(eg.logits, &[s.label])?;
        let value = eg.graph.value(loss)[(0, 0)];
        let mut grads = eg.graph.backward(loss, &Matrix::filled(1, 1, scale))?;
        Ok((value, eg.params.iter().map(|&id| grads.take(id)).collect()))
    });
    let mut total = 0.0;
    let mut sum: Option<Vec<Matrix>> = None;
    for r in per {
        let (l, g) = r?;
        total += l;
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    Ok((total * scale, sum.unwrap_or_default()))
}

fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Trains a freshly initialized encoder on `task`. The trace holds a row for
/// step 0, every `eval_every` steps, and the final step.
pub fn train(task: &ToyTask, cfg: &EncoderConfig, opts: &TrainOptions) -> Result<TrainTrace> {
    train_with_log(task, cfg, opts, |_| {})
}

/// [`train`] with a callback invoked for every trace row as it is produced.
pub fn train_with_log(
    task: &ToyTask,
    cfg: &EncoderConfig,
    opts: &TrainOptions,
    mut on_row: impl FnMut(&TraceRow),
) -> Result<TrainTrace> {
    if opts.steps == 0 {
        return Err(Error::config("steps must be >= 1"));
    }
    if opts.batch_size == 0 || opts.eval_every == 0 || opts.eval_size == 0 {
        return Err(Error::config(
            "batch_size, eval_every and eval_size must be positive",
        ));
    }
    if opts.lr.is_nan() || opts.lr < 0.0 || opts.clip_norm.is_nan() || opts.clip_norm <= 0.0 {
        return Err(Error::config("lr must be >= 0 and clip_norm > 0"));
    }
    if task.n != cfg.n || task.vocab != cfg.vocab {
        return Err(Error::config(format!(
            "task (n={}, vocab={}) does not match encoder (n={}, vocab={})",
            task.n, task.vocab, cfg.n, cfg.vocab
        )));
    }
    let mut params = EncoderParams::init(cfg, opts.seed)?;
    let mut optimizer = opts.optimizer.build(opts.lr);
    let eval = task.eval_set(opts.eval_size);
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut record =
        |step: usize, params: &EncoderParams, rows: &mut Vec<TraceRow>| -> Result<()> {
            let (loss, eval_accuracy) = evaluate(params, cfg, &eval)?;
            let row = TraceRow {
                step,
                loss,
                eval_accuracy,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            on_row(&row);
            rows.push(row);
            Ok(())
        };
    record(0, &params, &mut rows)?;
    for step in 1..=opts.steps {
        let batch = task.train_batch(step - 1, opts.batch_size);
        let (loss, mut grads) = batch_gradients(&params, cfg, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        clip_global_norm(&mut grads, opts.clip_norm);
        optimizer.step(&mut params.tensors_mut(), &grads);
        if step % opts.eval_every == 0 || step == opts.steps {
            record(step, &params, &mut rows)?;
        }
    }
    Ok(TrainTrace { rows, params })
}

/// Writes a trace header and rows as plain CSV to any writer.
pub fn write_trace<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderAttention, NystromSpec};

    fn tiny(attention: EncoderAttention) -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            d_model: 8,
            d_hidden: 8,
            heads: 2,
            vocab: 5,
            n: 8,
            attention,
        }
    }

    fn quick(lr: f64) -> TrainOptions {
        TrainOptions {
            steps: 6,
            lr,
            batch_size: 4,
            eval_every: 2,
            eval_size: 16,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let task = ToyTask::new(8, 5, 1).unwrap();
        let cfg = tiny(EncoderAttention::Nystrom(NystromSpec::new(4)));
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let opts = TrainOptions {
                optimizer: kind,
                ..quick(0.0)
            };
            let trace = train(&task, &cfg, &opts).unwrap();
            assert_eq!(trace.rows.len(), 4);
            assert!(trace.rows.iter().all(|r| r.loss == trace.rows[0].loss));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let task = ToyTask::new(8, 5, 2).unwrap();
        let cfg = tiny(EncoderAttention::Exact);
        let a = train(&task, &cfg, &quick(1e-2)).unwrap();
        let b = train(&task, &cfg, &quick(1e-2)).unwrap();
        let strip = |t: &TrainTrace| {
            t.rows
                .iter()
                .map(|r| (r.loss, r.eval_accuracy))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_ne!(a.rows[0].loss, a.rows[3].loss);
    }

    #[test]
    fn batch_gradient_matches_finite_difference() {
        let task = ToyTask::new(8, 5, 3).unwrap();
        let cfg = tiny(EncoderAttention::Nystrom(NystromSpec::new(4)));
        let mut params = EncoderParams::init(&cfg, 3).unwrap();
        let batch = task.train_batch(0, 2);
        let (_, grads) = batch_gradients(&params, &cfg, &batch).unwrap();
        let h = 1e-5;
        for (ti, ei) in [(0usize, 3usize), (2, 5), (9, 1), (17, 0)] {
            let orig = params.tensors()[ti].as_slice()[ei];
            params.tensors_mut()[ti].as_mut_slice()[ei] = orig + h;
            let (up, _) = batch_gradients(&params, &cfg, &batch).unwrap();
            params.tensors_mut()[ti].as_mut_slice()[ei] = orig - h;
            let (down, _) = batch_gradients(&params, &cfg, &batch).unwrap();
            params.tensors_mut()[ti].as_mut_slice()[ei] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[ti].as_slice()[ei];
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
                "tensor {ti}: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![Matrix::filled(2, 2, 3.0), Matrix::filled(1, 3, -4.0)];
        clip_global_norm(&mut g, 1.0);
        let norm: f64 = g
            .iter()
            .flat_map(|m| m.as_slice())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let mut small = vec![Matrix::filled(1, 1, 0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][(0, 0)], 0.5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Matrix::from_rows(&[[1.0, -1.0]]).unwrap();
        let g = Matrix::from_rows(&[[0.2, -3.0]]).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut p], &[g]);
        assert!((p[(0, 0)] - 0.9).abs() < 1e-6);
        assert!((p[(0, 1)] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_options() {
        let task = ToyTask::new(8, 5, 1).unwrap();
        let cfg = tiny(EncoderAttention::Exact);
        assert!(train(
            &task,
            &cfg,
            &TrainOptions {
                steps: 0,
                ..quick(0.1)
            }
        )
        .is_err());
        let other = ToyTask::new(16, 5, 1).unwrap();
        assert!(train(&other, &cfg, &quick(0.1)).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let task = ToyTask::new(8, 5, 1).unwrap();
        let cfg = tiny(EncoderAttention::Exact);
        let opts = TrainOptions {
            optimizer: OptimizerKind::Sgd,
            clip_norm: f64::MAX,
            ..quick(f64::MAX)
        };
        assert!(matches!(
            train(&task, &cfg, &opts),
            Err(Error::Diverged { .. })
        ));
    }
}
