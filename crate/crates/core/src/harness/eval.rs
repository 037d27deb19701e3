//! Held-out evaluation and index-order head pruning.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::task::{Example, TaskSpec};
use super::train::argmax;
use crate::attention::HeadMask;
use crate::error::{shape_err, Result};
use crate::model::{model_forward, ModelConfig, ParamStore, RunMode};
use crate::ndtensor::{Tape, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub token_accuracy: f64,
    /// Mean per-token negative log-likelihood in nats (no smoothing).
    pub nll: f64,
    pub tokens: usize,
}

/// Held-out examples for `split_seed`; disjoint from the training streams.
pub fn held_out(task: &TaskSpec, split_seed: u64, n: usize) -> Result<Vec<Example>> {
    task.generate(split_seed, rng::stream_id(&[rng::tag::EVAL_DATA]), n)
}

/// Scores any predictor that maps an input sequence to `[T, V]` logits.
pub fn score<F>(examples: &[Example], mut predict: F) -> Result<EvalResult>
where
    F: FnMut(&[usize]) -> Result<Tensor>,
{
    let (mut correct, mut nll, mut tokens) = (0usize, 0.0, 0usize);
    for ex in examples {
        let logits = predict(&ex.input)?;
        let v = logits.last_dim();
        if logits.numel() != v * ex.target.len() {
            return Err(shape_err!("predictor returned {:?} for {} targets", logits.shape(), ex.target.len()));
        }
        for (row, &t) in logits.data().chunks(v).zip(&ex.target) {
            if argmax(row) == t {
                correct += 1;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[t];
            tokens += 1;
        }
    }
    Ok(EvalResult { token_accuracy: correct as f64 / tokens as f64, nll: nll / tokens as f64, tokens })
}

/// Eval-mode logits of a trained model.
pub fn predict(params: &ParamStore, cfg: &ModelConfig, ids: &[usize], head_mask: Option<&HeadMask>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let mode = RunMode { head_mask: head_mask.cloned(), ..RunMode::eval() };
    let logits = model_forward(&mut tape, ids, &bound, cfg, &mode, None)?;
    Ok(tape.value(logits).clone())
}

pub fn evaluate(
    params: &ParamStore,
    cfg: &ModelConfig,
    task: &TaskSpec,
    split_seed: u64,
    n: usize,
    head_mask: Option<&HeadMask>,
) -> Result<EvalResult> {
    let examples = held_out(task, split_seed, n)?;
    score(&examples, |ids| predict(params, cfg, ids, head_mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub ratio: f64,
    pub heads_pruned: usize,
    pub token_accuracy: f64,
    pub nll: f64,
}

/// Re-evaluates with the first `ceil(ratio · M)` heads of every layer masked out.
pub fn prune_sweep(
    params: &ParamStore,
    cfg: &ModelConfig,
    task: &TaskSpec,
    split_seed: u64,
    n: usize,
    ratios: &[f64],
) -> Result<Vec<PruneRow>> {
    let examples = held_out(task, split_seed, n)?;
    ratios
        .iter()
        .map(|&ratio| {
            let mask = HeadMask::prune_leading(cfg.attn.heads, ratio)?;
            let res = score(&examples, |ids| predict(params, cfg, ids, Some(&mask)))?;
            Ok(PruneRow { ratio, heads_pruned: mask.pruned(), token_accuracy: res.token_accuracy, nll: res.nll })
        })
        .collect()
}

pub fn prune_csv(rows: &[PruneRow]) -> String {
    let mut out = String::from("ratio,heads_pruned,token_accuracy,nll\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.ratio, r.heads_pruned, r.token_accuracy, r.nll);
    }
    out
}
