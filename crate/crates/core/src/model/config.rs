use serde::{Deserialize, Serialize};

use crate::attention::AttnConfig;
use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormStyle {
    #[default]
    PreNorm,
    PostNorm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskHead {
    /// One prediction per input position.
    #[default]
    Tagging,
    /// Next-token prediction; attention is made causal.
    CausalLM,
}

fn default_ln_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    #[serde(default)]
    pub norm_style: NormStyle,
    pub attn: AttnConfig,
    #[serde(default)]
    pub residual_dropout: f64,
    #[serde(default)]
    pub relu_dropout: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub task_head: TaskHead,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Attention config as the layers actually run it.
    pub fn effective_attn(&self) -> AttnConfig {
        let mut a = self.attn.clone();
        if self.task_head == TaskHead::CausalLM {
            a.causal = true;
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(config_err!("a model needs at least one layer"));
        }
        if self.vocab_size == 0 || self.d == 0 || self.ffn_dim == 0 {
            return Err(config_err!("vocab_size, d and ffn_dim must be positive"));
        }
        if self.attn.d != self.d {
            return Err(config_err!("attention width {} differs from model width {}", self.attn.d, self.d));
        }
        for (name, p) in [("residual_dropout", self.residual_dropout), ("relu_dropout", self.relu_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(config_err!("{name} must be in [0, 1), got {p}"));
            }
        }
        if self.ln_eps <= 0.0 {
            return Err(config_err!("ln_eps must be positive"));
        }
        if self.ffn_dim < self.d {
            log::warn!("ffn_dim {} is narrower than d {}", self.ffn_dim, self.d);
        }
        self.effective_attn().validate()
    }
}
