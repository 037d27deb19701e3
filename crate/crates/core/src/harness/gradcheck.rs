//! Whole-model gradient check: every parameter tensor against central
//! finite differences of the training loss.

use serde::Serialize;

use super::task::Example;
use crate::error::{config_err, Result};
use crate::model::{model_forward, ModelConfig, ParamStore, RunMode};
use crate::ndtensor::gradcheck::{finite_diff_grad, max_relative_error, DEFAULT_EPS};
use crate::ndtensor::Tape;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn loss_of(params: &ParamStore, cfg: &ModelConfig, ex: &Example, mode: &RunMode, smoothing: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let logits = model_forward(&mut tape, &ex.input, &bound, cfg, mode, None)?;
    let loss = tape.smoothed_cross_entropy(logits, &ex.target, smoothing, ex.target.len() as f64)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares backprop against finite differences for every tensor in
/// `params`. Dropout masks are a pure function of `mode`, so train mode is
/// checked as well.
pub fn grad_check(
    params: &ParamStore,
    cfg: &ModelConfig,
    ex: &Example,
    mode: &RunMode,
    smoothing: f64,
) -> Result<GradCheckReport> {
    if ex.input.is_empty() {
        return Err(config_err!("grad check needs a non-empty example"));
    }
    let analytic = super::train::sample_grad(params, cfg, ex, mode, smoothing, ex.target.len() as f64)?;
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for ((name, value), grad) in params.iter().zip(&analytic.grads) {
        let numeric = finite_diff_grad(
            |x| {
                *probe.get_mut(name).expect("same layout") = x.clone();
                loss_of(&probe, cfg, ex, mode, smoothing)
            },
            value,
            DEFAULT_EPS,
        )?;
        *probe.get_mut(name).expect("same layout") = value.clone();
        out.push(ParamCheck { name: name.to_string(), numel: value.numel(), max_rel_err: max_relative_error(grad, &numeric) });
    }
    Ok(GradCheckReport { params: out })
}
