//! Adam training with an inverse-square-root schedule and label-smoothed
//! cross entropy.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalResult};
use super::task::{Example, TaskSpec};
use crate::error::{config_err, Error, Result};
use crate::metrics::population_std;
use crate::model::{self, checkpoint, model_forward, ModelConfig, ParamStore, RunMode};
use crate::ndtensor::{Tape, Tensor};
use crate::rng;

fn default_eval_examples() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Held-out evaluation period in steps; 0 disables it.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr_max: 3e-3,
            warmup_steps: 400,
            betas: (0.9, 0.98),
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 0,
            eval_examples: default_eval_examples(),
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(config_err!("warmup_steps must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config_err!("label_smoothing must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(config_err!("Adam betas must be in [0, 1)"));
        }
        Ok(())
    }
}

/// `lr_max · min(t / w, sqrt(w / t))` for 1-based step `t`.
pub fn inverse_sqrt_lr(step: usize, lr_max: f64, warmup: usize) -> f64 {
    let (t, w) = (step.max(1) as f64, warmup as f64);
    lr_max * (t / w).min((w / t).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,lr,loss,acc\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.lr, r.loss, r.acc);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<LogRow>,
    pub evals: Vec<(usize, EvalResult)>,
}

impl TrainOutcome {
    /// Writes `checkpoint.emha` and `train.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        checkpoint::save(&self.params, &dir.join("checkpoint.emha"))?;
        fs::write(dir.join("train.csv"), log_csv(&self.log))?;
        Ok(())
    }
}

/// Loss, correct predictions and per-parameter gradients (store order) for one example.
pub struct SampleGrad {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Tensor>,
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

pub fn sample_grad(
    params: &ParamStore,
    cfg: &ModelConfig,
    ex: &Example,
    mode: &RunMode,
    smoothing: f64,
    norm: f64,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let logits = model_forward(&mut tape, &ex.input, &bound, cfg, mode, None)?;
    let v = cfg.vocab_size;
    let correct = tape
        .value(logits)
        .data()
        .chunks(v)
        .zip(&ex.target)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    let loss = tape.smoothed_cross_entropy(logits, &ex.target, smoothing, norm)?;
    let mut grads = tape.backward(loss)?;
    let grads = bound
        .iter()
        .map(|(name, var)| {
            grads.take(var).unwrap_or_else(|| Tensor::zeros(params.get(name).expect("bound from store").shape()))
        })
        .collect();
    Ok(SampleGrad { loss: tape.value(loss).data()[0], correct, grads })
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Serialize)]
struct TensorStats {
    name: String,
    mean: f64,
    std: f64,
    max_abs: f64,
    finite: bool,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: usize,
    reason: String,
    batch_inputs: Vec<&'a [usize]>,
    batch_targets: Vec<&'a [usize]>,
    params: Vec<TensorStats>,
}

fn dump_divergence(dir: Option<&Path>, step: usize, reason: &str, batch: &[Example], params: &ParamStore) -> Error {
    let stats = params
        .iter()
        .map(|(name, t)| TensorStats {
            name: name.to_string(),
            mean: t.sum() / t.numel() as f64,
            std: population_std(t),
            max_abs: t.data().iter().fold(0.0f64, |a, v| a.max(v.abs())),
            finite: t.is_finite(),
        })
        .collect();
    let dump = DivergenceDump {
        step,
        reason: reason.to_string(),
        batch_inputs: batch.iter().map(|e| e.input.as_slice()).collect(),
        batch_targets: batch.iter().map(|e| e.target.as_slice()).collect(),
        params: stats,
    };
    if let Some(dir) = dir {
        let written = fs::create_dir_all(dir)
            .map_err(Error::from)
            .and_then(|_| Ok(serde_json::to_string_pretty(&dump)?))
            .and_then(|s| Ok(fs::write(dir.join("divergence.json"), s)?));
        if let Err(e) = written {
            log::error!("could not write divergence dump: {e}");
        }
    }
    Error::Diverged(format!("step {step}: {reason}"))
}

/// Trains a freshly built model. `dump_dir`, when given, receives a
/// diagnostic dump if the loss stops being finite.
pub fn train(cfg: &ModelConfig, task: &TaskSpec, tc: &TrainConfig, dump_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.validate()?;
    tc.validate()?;
    if task.vocab_size > cfg.vocab_size {
        return Err(config_err!("task vocabulary {} exceeds model vocabulary {}", task.vocab_size, cfg.vocab_size));
    }
    let mut params = model::build(cfg, tc.seed)?;
    let mut adam = Adam::new(&params);
    let mut log = Vec::with_capacity(tc.steps);
    let mut evals = Vec::new();
    let tokens = (tc.batch_size * task.seq_len) as f64;

    for step in 1..=tc.steps {
        let batch = task.generate(tc.seed, rng::stream_id(&[rng::tag::TRAIN_DATA, step as u64]), tc.batch_size)?;
        let mut total: Option<Vec<Tensor>> = None;
        let (mut loss, mut correct) = (0.0, 0);
        for (i, ex) in batch.iter().enumerate() {
            let mode = RunMode::train(tc.seed, rng::stream_id(&[rng::tag::DROPOUT, step as u64, i as u64]));
            let sg = match sample_grad(&params, cfg, ex, &mode, tc.label_smoothing, tokens) {
                Ok(sg) => sg,
                Err(Error::NonFinite(op)) => {
                    return Err(dump_divergence(dump_dir, step, &format!("non-finite value in {op}"), &batch, &params))
                }
                Err(e) => return Err(e),
            };
            loss += sg.loss;
            correct += sg.correct;
            match &mut total {
                None => total = Some(sg.grads),
                Some(acc) => acc.iter_mut().zip(&sg.grads).for_each(|(a, g)| a.accumulate(g)),
            }
        }
        if !loss.is_finite() {
            return Err(dump_divergence(dump_dir, step, "loss is not finite", &batch, &params));
        }
        let mut grads = total.expect("batch_size >= 1");
        clip_global_norm(&mut grads, tc.grad_clip);
        let lr = inverse_sqrt_lr(step, tc.lr_max, tc.warmup_steps);
        adam.step(&mut params, &grads, lr, tc);
        log.push(LogRow { step, lr, loss, acc: correct as f64 / tokens });

        if tc.eval_every > 0 && step % tc.eval_every == 0 {
            let res = evaluate(&params, cfg, task, tc.seed, tc.eval_examples, None)?;
            log::info!("step {step}: loss {loss:.4} held-out acc {:.4} nll {:.4}", res.token_accuracy, res.nll);
            evals.push((step, res));
        }
    }
    Ok(TrainOutcome { params, log, evals })
}

/// Moving average of the loss column over `window` steps ending at `step` (1-based).
pub fn smoothed_loss(log: &[LogRow], step: usize, window: usize) -> f64 {
    let end = step.min(log.len());
    let start = end.saturating_sub(window);
    let slice = &log[start..end];
    slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
}
