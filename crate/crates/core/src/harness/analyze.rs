//! Per-layer diagnostics over a fixed held-out batch.

use super::eval::held_out;
use super::task::{TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, LayerMetrics, MetricsReport, RunMetadata};
use crate::model::{model_forward, utilization_from_trace, LayerTrace, ModelConfig, ParamStore, RunMode};
use crate::ndtensor::Tape;

fn defined(r: Result<f64>, what: &str, layer: usize) -> Option<f64> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("layer {layer}: {what} undefined: {e}");
            None
        }
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn dataset_id(task: &TaskSpec, split_seed: u64) -> String {
    let kind = match task.kind {
        TaskKind::Reversal => "reversal",
        TaskKind::MarkovLM => "markov-lm",
    };
    format!("{kind}/v{}/t{}/split{split_seed}", task.vocab_size, task.seq_len)
}

/// Runs `samples` held-out examples with tracing and summarises every layer.
pub fn analyze(
    params: &ParamStore,
    cfg: &ModelConfig,
    task: &TaskSpec,
    split_seed: u64,
    samples: usize,
    config_hash: String,
) -> Result<MetricsReport> {
    if cfg.layers == 0 {
        return Err(Error::Config("nothing to analyze: model has no layers".into()));
    }
    let examples = held_out(task, split_seed, samples)?;
    // traces[layer][sample]
    let mut traces: Vec<Vec<LayerTrace>> = vec![Vec::with_capacity(samples); cfg.layers];
    for ex in &examples {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let mut trace = Vec::with_capacity(cfg.layers);
        model_forward(&mut tape, &ex.input, &bound, cfg, &RunMode::eval(), Some(&mut trace))?;
        for (l, tr) in trace.into_iter().enumerate() {
            traces[l].push(tr);
        }
    }

    let mut cross = vec![Vec::new(); cfg.layers];
    for s in 0..examples.len() {
        let feats: Vec<_> = traces.iter().map(|t| t[s].output.clone()).collect();
        match metrics::cross_layer_similarity(&feats) {
            Ok(sims) => sims.into_iter().enumerate().for_each(|(l, v)| cross[l].push(v)),
            Err(e) => log::warn!("sample {s}: cross-layer similarity undefined: {e}"),
        }
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, tr) in traces.iter().enumerate() {
        let probs: Vec<_> = tr.iter().map(|t| t.attn_probs.clone()).collect();
        let outputs: Vec<_> = tr.iter().map(|t| t.output.clone()).collect();
        let w = metrics::default_window(task.seq_len);
        let loc: Vec<f64> = probs.iter().filter_map(|a| defined(metrics::localness(a, w), "localness", l)).collect();
        let (mut ua, mut uf) = (Vec::new(), Vec::new());
        for t in tr {
            match utilization_from_trace(t) {
                Ok(u) => {
                    ua.push(u.ur_attn);
                    uf.push(u.ur_ffn);
                }
                Err(e) => log::warn!("layer {l}: utilization undefined: {e}"),
            }
        }
        layers.push(LayerMetrics {
            layer: l,
            head_similarity: defined(metrics::head_similarity(&probs), "head similarity", l),
            token_correlation: defined(metrics::token_correlation(&outputs), "token correlation", l),
            localness: mean(&loc),
            localness_window: w,
            ur_attn: mean(&ua),
            ur_ffn: mean(&uf),
            cross_layer_similarity: mean(&cross[l]),
        });
    }
    Ok(MetricsReport {
        metadata: RunMetadata { config_hash, seed: split_seed, dataset: dataset_id(task, split_seed), samples },
        layers,
    })
}
