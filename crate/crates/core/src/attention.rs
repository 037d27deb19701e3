//! Multi-head attention: the classical one-to-one form and the enhanced form
//! with many-to-many query/key pairing followed by map interaction.
//!
//! Attention maps travel as an [`AttnMapStack`], a `[H, T, T]` tensor on the
//! tape tagged with whether it still holds logits or already probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::interaction::{self, DeiVars};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::rng;

/// Additive logit used for masked positions.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MHSA", alias = "mhsa")]
    Mhsa,
    #[serde(rename = "EIT", alias = "eit")]
    Eit,
    #[serde(rename = "E_EIT", alias = "eeit", alias = "e_eit")]
    EEit,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mhsa, Variant::Eit, Variant::EEit];

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::Mhsa => "mhsa",
            Variant::Eit => "eit",
            Variant::EEit => "eeit",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mhsa" => Ok(Variant::Mhsa),
            "eit" => Ok(Variant::Eit),
            "eeit" | "e_eit" | "e-eit" => Ok(Variant::EEit),
            other => Err(Error::Usage(format!("unknown variant `{other}`"))),
        }
    }
}

/// Where the interaction stages sit relative to the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    #[default]
    #[serde(rename = "IsiPre_CsiPre")]
    IsiPreCsiPre,
    #[serde(rename = "IsiPre_CsiPost")]
    IsiPreCsiPost,
    #[serde(rename = "IsiPost_CsiPost")]
    IsiPostCsiPost,
}

impl Placement {
    pub const ALL: [Placement; 3] =
        [Placement::IsiPreCsiPre, Placement::IsiPreCsiPost, Placement::IsiPostCsiPost];
}

/// Kernel extents `(height, width)` of the ISI and CSI convolutions. Height
/// runs along the query axis of a map, width along the key axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Kernels {
    pub kh_isi: usize,
    pub kw_isi: usize,
    pub kh_csi: usize,
    pub kw_csi: usize,
}

impl Kernels {
    pub const ONES: Kernels = Kernels { kh_isi: 1, kw_isi: 1, kh_csi: 1, kw_csi: 1 };

    fn all(&self) -> [usize; 4] {
        [self.kh_isi, self.kw_isi, self.kh_csi, self.kw_csi]
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub d: usize,
    /// Head partition count.
    #[serde(rename = "M")]
    pub heads: usize,
    /// Key heads paired with each query head, `1..=M`.
    pub r: usize,
    pub variant: Variant,
    #[serde(default)]
    pub placement: Placement,
    /// Hidden channels between the two ISI convolutions.
    #[serde(rename = "M_H_isi", default)]
    pub isi_hidden: usize,
    /// Hidden channels between the two CSI convolutions.
    #[serde(rename = "M_H_csi", default)]
    pub csi_hidden: usize,
    /// Hidden channels of the fused single-layer interaction.
    #[serde(rename = "M_H", default)]
    pub eeit_hidden: usize,
    pub kernels: Kernels,
    #[serde(default = "yes")]
    pub enable_m2m: bool,
    #[serde(default = "yes")]
    pub enable_isi: bool,
    #[serde(default = "yes")]
    pub enable_csi: bool,
    #[serde(default)]
    pub causal: bool,
    #[serde(default)]
    pub shared_attention: bool,
    #[serde(default)]
    pub attn_dropout: f64,
}

impl AttnConfig {
    /// Classical attention with `heads` heads over width `d`.
    pub fn mhsa(d: usize, heads: usize) -> Self {
        Self {
            d,
            heads,
            r: 1,
            variant: Variant::Mhsa,
            placement: Placement::default(),
            isi_hidden: heads,
            csi_hidden: heads,
            eeit_hidden: heads,
            kernels: Kernels::ONES,
            enable_m2m: true,
            enable_isi: true,
            enable_csi: true,
            causal: false,
            shared_attention: false,
            attn_dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.heads;
        if m == 0 || self.d == 0 || self.d % m != 0 {
            return Err(config_err!("d = {} is not divisible by M = {m}", self.d));
        }
        if self.r == 0 || self.r > m {
            return Err(config_err!("receptive field r = {} outside 1..={m}", self.r));
        }
        if self.kernels.all().iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(config_err!("kernel extents must be odd, got {:?}", self.kernels));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(config_err!("attn_dropout must be in [0, 1), got {}", self.attn_dropout));
        }
        if self.causal && self.variant != Variant::Mhsa && self.kernels != Kernels::ONES {
            return Err(config_err!(
                "causal attention requires 1x1 interaction kernels, got {:?}",
                self.kernels
            ));
        }
        match self.variant {
            Variant::Mhsa => {}
            Variant::Eit => {
                if self.isi_hidden == 0 || self.isi_hidden % m != 0 {
                    return Err(config_err!("M_H_isi = {} must be a positive multiple of M = {m}", self.isi_hidden));
                }
                if self.csi_hidden == 0 {
                    return Err(config_err!("M_H_csi must be positive"));
                }
            }
            Variant::EEit => {
                if self.eeit_hidden == 0 || self.eeit_hidden % m != 0 {
                    return Err(config_err!("M_H = {} must be a positive multiple of M = {m}", self.eeit_hidden));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn uses_m2m(&self) -> bool {
        self.variant != Variant::Mhsa && self.enable_m2m
    }

    pub(crate) fn isi_active(&self) -> bool {
        self.variant != Variant::Mhsa && self.enable_isi
    }

    pub(crate) fn csi_active(&self) -> bool {
        self.variant != Variant::Mhsa && self.enable_csi
    }

    /// Number of maps produced by the logit stage.
    pub fn logit_maps(&self) -> usize {
        if self.uses_m2m() {
            self.heads * self.r
        } else {
            self.heads
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Logit,
    Prob,
}

/// `[H, T, T]` attention maps on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttnMapStack {
    pub maps: Var,
    pub domain: Domain,
}

impl AttnMapStack {
    pub fn heads(&self, tape: &Tape) -> usize {
        tape.shape(self.maps)[0]
    }

    pub fn seq_len(&self, tape: &Tape) -> usize {
        tape.shape(self.maps)[1]
    }

    pub fn value<'t>(&self, tape: &'t Tape) -> &'t Tensor {
        tape.value(self.maps)
    }
}

/// Per-head multipliers `eta_i` in `{0, 1}` on the aggregation sum.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMask {
    pub eta: Vec<f64>,
}

impl HeadMask {
    pub fn all_on(heads: usize) -> Self {
        Self { eta: vec![1.0; heads] }
    }

    /// Switches off the first `ceil(ratio * M)` heads by index.
    pub fn prune_leading(heads: usize, ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(config_err!("prune ratio must be in [0, 1], got {ratio}"));
        }
        let off = ((ratio * heads as f64) - 1e-9).ceil().max(0.0) as usize;
        Ok(Self { eta: (0..heads).map(|i| if i < off { 0.0 } else { 1.0 }).collect() })
    }

    pub fn pruned(&self) -> usize {
        self.eta.iter().filter(|&&e| e == 0.0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Causal,
    /// Key columns at or beyond `valid_len` are masked.
    Padding(usize),
}

/// Per-head query, key and value matrices, each `[T, d_k]`.
#[derive(Clone, Debug)]
pub struct Heads {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

/// Projects `x[T, d]` with full-width `[d, d]` matrices and splits the
/// results into `heads` column blocks. Block `i` equals `x · W[:, i·d_k..(i+1)·d_k]`.
pub fn project_heads(tape: &mut Tape, x: Var, wq: Var, wk: Var, wv: Var, heads: usize) -> Result<Heads> {
    let d = tape.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(config_err!("d = {d} is not divisible by M = {heads}"));
    }
    let dk = d / heads;
    let mut split = |w: Var| -> Result<Vec<Var>> {
        let full = tape.matmul(x, w)?;
        (0..heads).map(|i| tape.slice_cols(full, i * dk, dk)).collect()
    };
    Ok(Heads { q: split(wq)?, k: split(wk)?, v: split(wv)? })
}

/// Query/key head pairs (0-based) produced by the many-to-many mapping, in
/// map order, grouped by query head.
///
/// With the full receptive field (`r == M`) map `n` pairs query `n / M` with
/// key `n % M`. With `r < M` query head `i` meets keys `i, i+1, ..., i+r-1`
/// (mod `M`), in that order.
pub fn m2m_pairs(heads: usize, r: usize) -> Vec<(usize, usize)> {
    if r == heads {
        return (0..heads * heads).map(|n| (n / heads, n % heads)).collect();
    }
    (0..heads).flat_map(|i| (0..r).map(move |j| (i, (i + j) % heads))).collect()
}

fn scaled_logits(tape: &mut Tape, q: Var, k: Var, dk: usize) -> Result<Var> {
    let raw = tape.matmul_nt(q, k)?;
    tape.scale(raw, 1.0 / (dk as f64).sqrt())
}

/// Many-to-many logits: one `Q^a (K^b)^T / sqrt(d_k)` map per pair of [`m2m_pairs`].
pub fn m2m_logits(tape: &mut Tape, heads: &Heads, r: usize) -> Result<AttnMapStack> {
    let m = heads.q.len();
    if r == 0 || r > m {
        return Err(config_err!("receptive field r = {r} outside 1..={m}"));
    }
    let dk = tape.shape(heads.q[0])[1];
    let maps = m2m_pairs(m, r)
        .into_iter()
        .map(|(a, b)| scaled_logits(tape, heads.q[a], heads.k[b], dk))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttnMapStack { maps: tape.stack(&maps)?, domain: Domain::Logit })
}

/// One-to-one logits `Q^i (K^i)^T / sqrt(d_k)`.
pub fn standard_logits(tape: &mut Tape, heads: &Heads) -> Result<AttnMapStack> {
    let dk = tape.shape(heads.q[0])[1];
    let maps = heads
        .q
        .iter()
        .zip(&heads.k)
        .map(|(&q, &k)| scaled_logits(tape, q, k, dk))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttnMapStack { maps: tape.stack(&maps)?, domain: Domain::Logit })
}

/// `[H, T, T]` indicator of positions a query may attend to.
pub fn visibility(heads: usize, t: usize, mode: MaskMode) -> Tensor {
    Tensor::from_fn(&[heads, t, t], |i| {
        let (row, col) = ((i / t) % t, i % t);
        let visible = match mode {
            MaskMode::Causal => col <= row,
            MaskMode::Padding(valid) => col < valid,
        };
        if visible {
            1.0
        } else {
            0.0
        }
    })
}

/// Adds [`MASK_VALUE`] to masked logits.
pub fn apply_mask(tape: &mut Tape, s: AttnMapStack, mode: MaskMode) -> Result<AttnMapStack> {
    if s.domain != Domain::Logit {
        return Err(Error::Usage("masks apply to logits, not probabilities".into()));
    }
    let (h, t) = (s.heads(tape), s.seq_len(tape));
    if let MaskMode::Padding(valid) = mode {
        if valid == 0 || valid > t {
            return Err(config_err!("valid length {valid} outside 1..={t}"));
        }
        if valid == t {
            return Ok(s);
        }
    }
    let additive = visibility(h, t, mode).map(|v| if v == 1.0 { 0.0 } else { MASK_VALUE });
    Ok(AttnMapStack { maps: tape.add_const(s.maps, &additive)?, domain: Domain::Logit })
}

pub fn softmax(tape: &mut Tape, s: AttnMapStack) -> Result<AttnMapStack> {
    if s.domain != Domain::Logit {
        return Err(Error::Usage("softmax of maps that are already probabilities".into()));
    }
    Ok(AttnMapStack { maps: tape.softmax_rows(s.maps)?, domain: Domain::Prob })
}

/// Linear mixing along the head axis: `W_R · (W_E · A)`, applied independently
/// at every `(t, s)` position. `w_expand: [M_e, M]`, `w_reduce: [M, M_e]`.
pub fn attention_expansion(tape: &mut Tape, a: AttnMapStack, w_expand: Var, w_reduce: Var) -> Result<AttnMapStack> {
    let (m, t) = (a.heads(tape), a.seq_len(tape));
    let &[me, m_in] = tape.shape(w_expand) else {
        return Err(shape_err!("expansion weight must be a matrix"));
    };
    if m_in != m || tape.shape(w_reduce) != [m, me] {
        return Err(shape_err!(
            "expansion weights {:?}/{:?} do not fit {m} maps",
            tape.shape(w_expand),
            tape.shape(w_reduce)
        ));
    }
    if me < m {
        return Err(config_err!("expanded head count {me} is below M = {m}"));
    }
    let flat = tape.reshape(a.maps, &[m, t * t])?;
    let expanded = tape.matmul(w_expand, flat)?;
    let reduced = tape.matmul(w_reduce, expanded)?;
    Ok(AttnMapStack { maps: tape.reshape(reduced, &[m, t, t])?, domain: a.domain })
}

fn check_prob_stack(tape: &Tape, a: &AttnMapStack, heads: &Heads) -> Result<()> {
    if a.domain != Domain::Prob {
        return Err(Error::Usage("aggregation needs probability-domain maps".into()));
    }
    if a.heads(tape) != heads.v.len() {
        return Err(shape_err!("{} maps for {} value heads", a.heads(tape), heads.v.len()));
    }
    Ok(())
}

fn combine_heads(tape: &mut Tape, per_head: Vec<Var>, wo: Var, eta: Option<&HeadMask>) -> Result<Var> {
    let per_head = match eta {
        None => per_head,
        Some(mask) => {
            if mask.eta.len() != per_head.len() {
                return Err(config_err!("head mask of length {} for {} heads", mask.eta.len(), per_head.len()));
            }
            per_head
                .into_iter()
                .zip(&mask.eta)
                .map(|(h, &e)| tape.scale(h, e))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let cat = tape.concat_cols(&per_head)?;
    tape.matmul(cat, wo)
}

/// `O = sum_i eta_i · A^i · V^i · W_O^i`, where `W_O^i` is row block `i` of `wo`.
pub fn aggregate(tape: &mut Tape, a: AttnMapStack, heads: &Heads, wo: Var, eta: Option<&HeadMask>) -> Result<Var> {
    check_prob_stack(tape, &a, heads)?;
    let per_head = heads
        .v
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let map = tape.index_axis0(a.maps, i)?;
            tape.matmul(map, v)
        })
        .collect::<Result<Vec<_>>>()?;
    combine_heads(tape, per_head, wo, eta)
}

/// Like [`aggregate`] but every head reads the first map `A^1`.
pub fn shared_attention_aggregate(
    tape: &mut Tape,
    a: AttnMapStack,
    heads: &Heads,
    wo: Var,
    eta: Option<&HeadMask>,
) -> Result<Var> {
    check_prob_stack(tape, &a, heads)?;
    let shared = tape.index_axis0(a.maps, 0)?;
    let per_head = heads.v.iter().map(|&v| tape.matmul(shared, v)).collect::<Result<Vec<_>>>()?;
    combine_heads(tape, per_head, wo, eta)
}

/// Tape handles of one attention layer's parameters.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub dei: DeiVars,
}

/// Forward-pass switches shared by every layer.
#[derive(Clone, Debug, Default)]
pub struct ForwardCtx {
    pub train: bool,
    pub seed: u64,
    /// Dropout stream of this attention call.
    pub stream: u64,
    pub head_mask: Option<HeadMask>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self::default()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnOutput {
    pub out: Var,
    /// Final `[M, T, T]` probability maps fed to aggregation (before dropout).
    pub probs: AttnMapStack,
}

/// Full attention sublayer on `x[T, d]`.
///
/// With `IsiPre_CsiPre` the order is logits, ISI, CSI, mask, softmax,
/// aggregate. `IsiPre_CsiPost` moves CSI after the softmax and
/// `IsiPost_CsiPost` moves both stages there; post-softmax stages are
/// followed by re-masking and row renormalization. A disabled M2M falls back
/// to one-to-one logits, a disabled ISI to selecting each query head's own
/// map, a disabled CSI to the identity.
pub fn emha_forward(tape: &mut Tape, x: Var, p: &AttnParams, cfg: &AttnConfig, ctx: &ForwardCtx) -> Result<AttnOutput> {
    cfg.validate()?;
    let heads = project_heads(tape, x, p.wq, p.wk, p.wv, cfg.heads)?;
    let logits = if cfg.uses_m2m() {
        m2m_logits(tape, &heads, cfg.r)?
    } else {
        standard_logits(tape, &heads)?
    };
    let t = logits.seq_len(tape);
    let mask = cfg.causal.then_some(MaskMode::Causal);
    let masked = |tape: &mut Tape, s: AttnMapStack| match mask {
        Some(mode) => apply_mask(tape, s, mode),
        None => Ok(s),
    };

    let probs = match cfg.variant {
        Variant::Mhsa => {
            let s = masked(tape, logits)?;
            softmax(tape, s)?
        }
        _ => {
            let (isi_pre, csi_pre) = match cfg.placement {
                Placement::IsiPreCsiPre => (true, true),
                Placement::IsiPreCsiPost => (true, false),
                Placement::IsiPostCsiPost => (false, false),
            };
            let mut s = logits;
            if isi_pre {
                s = interaction::isi_stage(tape, s, &p.dei, cfg)?;
            }
            if csi_pre {
                s = interaction::csi_stage(tape, s, &p.dei, cfg)?;
            }
            s = masked(tape, s)?;
            let mut a = softmax(tape, s)?;
            let mut convolved = false;
            if !isi_pre {
                convolved |= cfg.isi_active();
                a = interaction::isi_stage(tape, a, &p.dei, cfg)?;
            }
            if !csi_pre {
                convolved |= cfg.csi_active();
                a = interaction::csi_stage(tape, a, &p.dei, cfg)?;
            }
            if convolved {
                a.maps = match mask {
                    Some(mode) => tape.renormalize_rows_within(a.maps, &visibility(a.heads(tape), t, mode))?,
                    None => tape.renormalize_rows(a.maps)?,
                };
            }
            a
        }
    };
    if probs.heads(tape) != cfg.heads {
        return Err(shape_err!("interaction produced {} maps, expected M = {}", probs.heads(tape), cfg.heads));
    }

    let dropped = AttnMapStack {
        maps: tape.dropout(probs.maps, cfg.attn_dropout, ctx.seed, rng::stream_id(&[ctx.stream, 0]), ctx.train)?,
        domain: Domain::Prob,
    };
    let out = if cfg.shared_attention {
        shared_attention_aggregate(tape, dropped, &heads, p.wo, ctx.head_mask.as_ref())?
    } else {
        aggregate(tape, dropped, &heads, p.wo, ctx.head_mask.as_ref())?
    };
    Ok(AttnOutput { out, probs })
}
