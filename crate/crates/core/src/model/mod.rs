//! Encoder model: configuration, parameters, forward pass and checkpoints.

pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use config::{ModelConfig, NormStyle, TaskHead};
pub use forward::{
    block_forward, model_forward, positional_encoding, utilization_from_trace, utilization_probe, LayerTrace, RunMode,
    Utilization,
};
pub use params::{build, count_params, param_shapes, BoundParams, Init, LayerVars, ParamSpec, ParamStore};
