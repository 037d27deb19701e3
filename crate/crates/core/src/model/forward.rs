//! Encoder forward pass.

use super::config::{ModelConfig, NormStyle};
use super::params::{BoundParams, LayerVars};
use crate::attention::{emha_forward, ForwardCtx, HeadMask};
use crate::error::{Error, Result};
use crate::metrics;
use crate::ndtensor::{Tape, Tensor, Var};
use crate::rng;

/// Train/eval switch plus the randomness and pruning that go with it.
#[derive(Clone, Debug, Default)]
pub struct RunMode {
    pub train: bool,
    pub seed: u64,
    /// Dropout stream of this forward call (typically derived from step and sample).
    pub stream: u64,
    pub head_mask: Option<HeadMask>,
}

impl RunMode {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(seed: u64, stream: u64) -> Self {
        Self { train: true, seed, stream, head_mask: None }
    }

    fn site(&self, layer: usize, site: u64) -> u64 {
        rng::stream_id(&[self.stream, layer as u64, site])
    }
}

/// Values captured from one block during a forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Final `[M, T, T]` attention probabilities.
    pub attn_probs: Tensor,
    /// Attention sublayer output and the residual it is added to.
    pub attn_out: Tensor,
    pub attn_residual: Tensor,
    pub ffn_out: Tensor,
    pub ffn_residual: Tensor,
    /// Block output.
    pub output: Tensor,
}

/// Sinusoidal position table `[T, d]`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[t, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 10000f64.powf(-((j - j % 2) as f64) / d as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

fn ffn(tape: &mut Tape, x: Var, lv: &LayerVars, cfg: &ModelConfig, mode: &RunMode, layer: usize) -> Result<Var> {
    let h = tape.matmul(x, lv.w1)?;
    let h = tape.add_row_bias(h, lv.b1)?;
    let h = tape.relu(h)?;
    let h = tape.dropout(h, cfg.relu_dropout, mode.seed, mode.site(layer, 3), mode.train)?;
    let h = tape.matmul(h, lv.w2)?;
    tape.add_row_bias(h, lv.b2)
}

/// One residual block. PreNorm: `x + Drop(Attn(LN(x)))` then
/// `x + Drop(FFN(LN(x)))`; PostNorm: `LN(x + Drop(Attn(x)))` then
/// `LN(x + Drop(FFN(x)))`.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    lv: &LayerVars,
    cfg: &ModelConfig,
    mode: &RunMode,
    layer: usize,
    mut trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Var> {
    let acfg = cfg.effective_attn();
    let eps = cfg.ln_eps;
    let ctx = ForwardCtx {
        train: mode.train,
        seed: mode.seed,
        stream: mode.site(layer, 0),
        head_mask: mode.head_mask.clone(),
    };
    let pre = cfg.norm_style == NormStyle::PreNorm;

    let attn_in = if pre { tape.layer_norm(x, lv.attn_norm.0, lv.attn_norm.1, eps)? } else { x };
    let attn = emha_forward(tape, attn_in, &lv.attn, &acfg, &ctx)?;
    let attn_out = tape.dropout(attn.out, cfg.residual_dropout, mode.seed, mode.site(layer, 1), mode.train)?;
    let sum1 = tape.add(x, attn_out)?;
    let x1 = if pre { sum1 } else { tape.layer_norm(sum1, lv.attn_norm.0, lv.attn_norm.1, eps)? };

    let ffn_in = if pre { tape.layer_norm(x1, lv.ffn_norm.0, lv.ffn_norm.1, eps)? } else { x1 };
    let f = ffn(tape, ffn_in, lv, cfg, mode, layer)?;
    let ffn_out = tape.dropout(f, cfg.residual_dropout, mode.seed, mode.site(layer, 2), mode.train)?;
    let sum2 = tape.add(x1, ffn_out)?;
    let out = if pre { sum2 } else { tape.layer_norm(sum2, lv.ffn_norm.0, lv.ffn_norm.1, eps)? };

    if let Some(tr) = trace.as_deref_mut() {
        tr.push(LayerTrace {
            attn_probs: attn.probs.value(tape).clone(),
            attn_out: tape.value(attn_out).clone(),
            attn_residual: tape.value(x).clone(),
            ffn_out: tape.value(ffn_out).clone(),
            ffn_residual: tape.value(x1).clone(),
            output: tape.value(out).clone(),
        });
    }
    Ok(out)
}

/// Token ids to logits `[T, vocab]`.
pub fn model_forward(
    tape: &mut Tape,
    ids: &[usize],
    params: &BoundParams,
    cfg: &ModelConfig,
    mode: &RunMode,
    mut trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Usage(format!("token id {bad} out of range for vocab {}", cfg.vocab_size)));
    }
    let embed = params.var("embed")?;
    let e = tape.embedding(embed, ids)?;
    let e = tape.scale(e, (cfg.d as f64).sqrt())?;
    let mut x = tape.add_const(e, &positional_encoding(ids.len(), cfg.d))?;
    x = tape.dropout(x, cfg.residual_dropout, mode.seed, mode.site(usize::MAX, 0), mode.train)?;
    for l in 0..cfg.layers {
        let lv = params.layer(cfg, l)?;
        x = block_forward(tape, x, &lv, cfg, mode, l, trace.as_deref_mut())?;
    }
    if cfg.norm_style == NormStyle::PreNorm {
        x = tape.layer_norm(x, params.var("final_norm.gain")?, params.var("final_norm.bias")?, cfg.ln_eps)?;
    }
    let logits = if cfg.tie_embeddings {
        tape.matmul_nt(x, embed)?
    } else {
        tape.matmul(x, params.var("out.weight")?)?
    };
    tape.add_row_bias(logits, params.var("out.bias")?)
}

/// Utilization ratios of one block's attention and FFN sublayers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Utilization {
    pub ur_attn: f64,
    pub ur_ffn: f64,
}

/// Runs block `layer` in eval mode on `x[T, d]` and reports
/// `std(f) / std(f + residual)` for both sublayers.
pub fn utilization_probe(x: &Tensor, params: &BoundParams, tape: &mut Tape, cfg: &ModelConfig, layer: usize) -> Result<Utilization> {
    let lv = params.layer(cfg, layer)?;
    let xv = tape.constant(x.clone());
    let mut trace = Vec::new();
    block_forward(tape, xv, &lv, cfg, &RunMode::eval(), layer, Some(&mut trace))?;
    utilization_from_trace(&trace[0])
}

pub fn utilization_from_trace(tr: &LayerTrace) -> Result<Utilization> {
    let ur = |f: &Tensor, res: &Tensor| -> Result<f64> {
        let combined = Tensor::new(f.shape().to_vec(), f.data().iter().zip(res.data()).map(|(a, b)| a + b).collect())?;
        metrics::ur(f, &combined)
    };
    Ok(Utilization { ur_attn: ur(&tr.attn_out, &tr.attn_residual)?, ur_ffn: ur(&tr.ffn_out, &tr.ffn_residual)? })
}
