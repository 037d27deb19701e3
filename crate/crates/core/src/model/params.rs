//! Named parameter storage, shape enumeration and initialization.

use indexmap::IndexMap;
use rand::Rng;

use super::config::{ModelConfig, NormStyle};
use crate::attention::AttnParams;
use crate::error::{shape_err, Error, Result};
use crate::interaction::{dei_layout, ConvVars, DeiVars};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::rng;

/// Ordered map of parameter name to tensor; iteration follows insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }

    /// Checks that names and shapes agree with `other` (same order).
    pub fn ensure_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(shape_err!("parameter counts differ: {} vs {}", self.len(), other.len()));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(shape_err!("parameter `{na}` {:?} does not match `{nb}` {:?}", ta.shape(), tb.shape()));
            }
        }
        Ok(())
    }
}

/// [`ParamStore`] entries placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| shape_err!("missing parameter `{name}`"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub(crate) fn layer(&self, cfg: &ModelConfig, l: usize) -> Result<LayerVars> {
        let p = |s: &str| self.var(&format!("layers.{l}.{s}"));
        let acfg = cfg.effective_attn();
        let mut dei = DeiVars::default();
        for spec in dei_layout(&acfg) {
            let weight = p(&format!("attn.{}.weight", spec.name))?;
            let bias = p(&format!("attn.{}.bias", spec.name))?;
            *dei.slot_mut(spec.name).expect("layout names are known slots") =
                Some(ConvVars { weight, bias, groups: spec.groups });
        }
        Ok(LayerVars {
            attn_norm: (p("attn_norm.gain")?, p("attn_norm.bias")?),
            attn: AttnParams { wq: p("attn.wq")?, wk: p("attn.wk")?, wv: p("attn.wv")?, wo: p("attn.wo")?, dei },
            ffn_norm: (p("ffn_norm.gain")?, p("ffn_norm.bias")?),
            w1: p("ffn.w1")?,
            b1: p("ffn.b1")?,
            w2: p("ffn.w2")?,
            b2: p("ffn.b2")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm: (Var, Var),
    pub attn: AttnParams,
    pub ffn_norm: (Var, Var),
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform { fan_in: usize, fan_out: usize },
    /// `U(-a, a)`, `a = sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    /// Uniform with standard deviation `d^-1/2`.
    Embedding { d: usize },
}

impl Init {
    fn bound(self) -> Option<f64> {
        match self {
            Init::Zeros | Init::Ones => None,
            Init::XavierUniform { fan_in, fan_out } => Some((6.0 / (fan_in + fan_out) as f64).sqrt()),
            Init::KaimingUniform { fan_in } => Some((6.0 / fan_in as f64).sqrt()),
            Init::Embedding { d } => Some((3.0 / d as f64).sqrt()),
        }
    }

    pub fn sample(self, shape: &[usize], seed: u64, stream: u64) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            _ => {
                let a = self.bound().expect("random init has a bound");
                let mut gen = rng::stream(seed, stream);
                Tensor::from_fn(shape, |_| gen.gen_range(-a..a))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every parameter tensor of the model described by `cfg`, in store order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, v, f) = (cfg.d, cfg.vocab_size, cfg.ffn_dim);
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| out.push(ParamSpec { name, shape, init });
    push("embed".into(), vec![v, d], Init::Embedding { d });
    let acfg = cfg.effective_attn();
    for l in 0..cfg.layers {
        let n = |s: &str| format!("layers.{l}.{s}");
        push(n("attn_norm.gain"), vec![d], Init::Ones);
        push(n("attn_norm.bias"), vec![d], Init::Zeros);
        for w in ["wq", "wk", "wv", "wo"] {
            push(n(&format!("attn.{w}")), vec![d, d], Init::XavierUniform { fan_in: d, fan_out: d });
        }
        for spec in dei_layout(&acfg) {
            push(n(&format!("attn.{}.weight", spec.name)), spec.weight_shape().to_vec(), Init::KaimingUniform {
                fan_in: spec.fan_in(),
            });
            push(n(&format!("attn.{}.bias", spec.name)), vec![spec.c_out], Init::Zeros);
        }
        push(n("ffn_norm.gain"), vec![d], Init::Ones);
        push(n("ffn_norm.bias"), vec![d], Init::Zeros);
        push(n("ffn.w1"), vec![d, f], Init::XavierUniform { fan_in: d, fan_out: f });
        push(n("ffn.b1"), vec![f], Init::Zeros);
        push(n("ffn.w2"), vec![f, d], Init::XavierUniform { fan_in: f, fan_out: d });
        push(n("ffn.b2"), vec![d], Init::Zeros);
    }
    if cfg.norm_style == NormStyle::PreNorm {
        push("final_norm.gain".into(), vec![d], Init::Ones);
        push("final_norm.bias".into(), vec![d], Init::Zeros);
    }
    if !cfg.tie_embeddings {
        push("out.weight".into(), vec![d, v], Init::XavierUniform { fan_in: d, fan_out: v });
    }
    push("out.bias".into(), vec![v], Init::Zeros);
    out
}

/// Element count of the model described by `cfg`, without allocating it.
pub fn count_params(cfg: &ModelConfig) -> usize {
    param_shapes(cfg).iter().map(ParamSpec::numel).sum()
}

/// Allocates and initializes all parameters. Deterministic in `seed`.
pub fn build(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for spec in param_shapes(cfg) {
        // Keyed by name so tensors shared between variants start identical.
        let stream = rng::stream_id(&[rng::tag::INIT, rng::fnv1a(spec.name.as_bytes())]);
        let t = spec.init.sample(&spec.shape, seed, stream);
        store.insert(spec.name, t)?;
    }
    Ok(store)
}
