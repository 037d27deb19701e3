//! Interaction stages over attention maps.
//!
//! Maps are treated as channels of a `[H, T, T]` image. The inner-subspace
//! stage (ISI) uses grouped convolutions with one group per query head, so
//! maps sharing a query only mix with each other and the `M·r` input maps
//! shrink to `M`. The cross-subspace stage (CSI) uses ordinary convolutions
//! and mixes all `M` maps. The efficient variant fuses both into one grouped
//! and one ordinary convolution.

use serde::Serialize;

use crate::attention::{m2m_pairs, AttnConfig, AttnMapStack, Variant};
use crate::error::{config_err, shape_err, Result};
use crate::ndtensor::{Tape, Var};

/// Shape of one interaction convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    /// Parameter-name stem: `isi0`, `isi1`, `csi0` or `csi1`.
    pub name: &'static str,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.kh, self.kw]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.c_out
    }

    /// Fan-in used by the Kaiming initializer.
    pub fn fan_in(&self) -> usize {
        (self.c_in / self.groups) * self.kh * self.kw
    }
}

/// Convolutions one attention layer allocates for `cfg`, honoring the
/// variant and the stage toggles. Empty for classical attention.
pub fn dei_layout(cfg: &AttnConfig) -> Vec<ConvSpec> {
    let m = cfg.heads;
    let k = cfg.kernels;
    let in_maps = cfg.logit_maps();
    let isi = |name, c_in, c_out| ConvSpec { name, c_in, c_out, groups: m, kh: k.kh_isi, kw: k.kw_isi };
    let csi = |name, c_in, c_out| ConvSpec { name, c_in, c_out, groups: 1, kh: k.kh_csi, kw: k.kw_csi };
    let mut specs = Vec::new();
    match cfg.variant {
        Variant::Mhsa => {}
        Variant::Eit => {
            if cfg.enable_isi {
                specs.push(isi("isi0", in_maps, cfg.isi_hidden));
                specs.push(isi("isi1", cfg.isi_hidden, m));
            }
            if cfg.enable_csi {
                specs.push(csi("csi0", m, cfg.csi_hidden));
                specs.push(csi("csi1", cfg.csi_hidden, m));
            }
        }
        Variant::EEit => match (cfg.enable_isi, cfg.enable_csi) {
            (true, true) => {
                specs.push(isi("isi0", in_maps, cfg.eeit_hidden));
                specs.push(csi("csi0", cfg.eeit_hidden, m));
            }
            (true, false) => specs.push(isi("isi0", in_maps, m)),
            (false, true) => specs.push(csi("csi0", m, m)),
            (false, false) => {}
        },
    }
    specs
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub groups: usize,
}

/// Tape handles for the interaction convolutions of one layer.
/// `f0`/`f1` are the ISI convolutions, `g0`/`g1` the CSI ones.
#[derive(Clone, Copy, Debug, Default)]
pub struct DeiVars {
    pub f0: Option<ConvVars>,
    pub f1: Option<ConvVars>,
    pub g0: Option<ConvVars>,
    pub g1: Option<ConvVars>,
}

impl DeiVars {
    pub fn slot_mut(&mut self, name: &str) -> Option<&mut Option<ConvVars>> {
        match name {
            "isi0" => Some(&mut self.f0),
            "isi1" => Some(&mut self.f1),
            "csi0" => Some(&mut self.g0),
            "csi1" => Some(&mut self.g1),
            _ => None,
        }
    }
}

fn conv(tape: &mut Tape, x: Var, c: Option<ConvVars>, which: &str) -> Result<Var> {
    let c = c.ok_or_else(|| config_err!("interaction convolution `{which}` is not allocated"))?;
    tape.conv2d(x, c.weight, c.bias, c.groups)
}

fn restack(s: AttnMapStack, maps: Var) -> AttnMapStack {
    AttnMapStack { maps, domain: s.domain }
}

fn expect_heads(tape: &Tape, s: &AttnMapStack, want: usize, stage: &str) -> Result<()> {
    let h = s.heads(tape);
    if h != want {
        return Err(shape_err!("{stage} expects {want} maps, got {h}"));
    }
    Ok(())
}

/// `f1(ReLU(f0(S)))` with grouped convolutions; `M·r` maps in, `M` out.
pub fn isi_forward(tape: &mut Tape, s: AttnMapStack, p: &DeiVars, cfg: &AttnConfig) -> Result<AttnMapStack> {
    expect_heads(tape, &s, cfg.logit_maps(), "ISI")?;
    let h = conv(tape, s.maps, p.f0, "isi0")?;
    let h = tape.relu(h)?;
    let out = conv(tape, h, p.f1, "isi1")?;
    let out = restack(s, out);
    expect_heads(tape, &out, cfg.heads, "ISI output")?;
    Ok(out)
}

/// `g1(ReLU(g0(S)))` with ordinary convolutions; `M` maps in and out.
pub fn csi_forward(tape: &mut Tape, s: AttnMapStack, p: &DeiVars, cfg: &AttnConfig) -> Result<AttnMapStack> {
    expect_heads(tape, &s, cfg.heads, "CSI")?;
    let h = conv(tape, s.maps, p.g0, "csi0")?;
    let h = tape.relu(h)?;
    let out = conv(tape, h, p.g1, "csi1")?;
    Ok(restack(s, out))
}

/// Fused single-layer interaction `g0(ReLU(f0(S)))`.
pub fn eeit_forward(tape: &mut Tape, s: AttnMapStack, p: &DeiVars, cfg: &AttnConfig) -> Result<AttnMapStack> {
    if p.f1.is_some() || p.g1.is_some() {
        return Err(config_err!("fused interaction takes no second-layer convolutions"));
    }
    expect_heads(tape, &s, cfg.logit_maps(), "fused interaction")?;
    let h = conv(tape, s.maps, p.f0, "isi0")?;
    let h = tape.relu(h)?;
    let out = conv(tape, h, p.g0, "csi0")?;
    let out = restack(s, out);
    expect_heads(tape, &out, cfg.heads, "fused interaction output")?;
    Ok(out)
}

/// Picks map `(i, i)` of every query head out of the many-to-many stack.
pub(crate) fn diagonal_selection(tape: &mut Tape, s: AttnMapStack, cfg: &AttnConfig) -> Result<AttnMapStack> {
    if !cfg.uses_m2m() {
        return Ok(s);
    }
    let pairs = m2m_pairs(cfg.heads, cfg.r);
    let idx: Vec<usize> = (0..cfg.heads)
        .map(|i| pairs.iter().position(|&p| p == (i, i)).expect("every receptive field contains its own head"))
        .collect();
    Ok(restack(s, tape.select_axis0(s.maps, &idx)?))
}

/// The ISI half of the pipeline as configured (including toggles).
pub(crate) fn isi_stage(tape: &mut Tape, s: AttnMapStack, p: &DeiVars, cfg: &AttnConfig) -> Result<AttnMapStack> {
    if !cfg.isi_active() {
        return diagonal_selection(tape, s, cfg);
    }
    match cfg.variant {
        Variant::Eit => isi_forward(tape, s, p, cfg),
        Variant::EEit => {
            let h = conv(tape, s.maps, p.f0, "isi0")?;
            // Without the CSI half the grouped conv emits the M final maps directly.
            let h = if cfg.enable_csi { tape.relu(h)? } else { h };
            Ok(restack(s, h))
        }
        Variant::Mhsa => Ok(s),
    }
}

/// The CSI half of the pipeline as configured (including toggles).
pub(crate) fn csi_stage(tape: &mut Tape, s: AttnMapStack, p: &DeiVars, cfg: &AttnConfig) -> Result<AttnMapStack> {
    if !cfg.csi_active() {
        return Ok(s);
    }
    match cfg.variant {
        Variant::Eit => csi_forward(tape, s, p, cfg),
        Variant::EEit => {
            let out = conv(tape, s.maps, p.g0, "csi0")?;
            Ok(restack(s, out))
        }
        Variant::Mhsa => Ok(s),
    }
}

/// Exact parameter counts of the interaction stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DeiParamCount {
    pub layers: usize,
    pub eit_per_layer: usize,
    pub eit_per_layer_weights_only: usize,
    pub eeit_per_layer: usize,
    pub eeit_per_layer_weights_only: usize,
    pub eit_total: usize,
    pub eeit_total: usize,
}

/// Counts for the full (all stages enabled) EIT and E-EIT layouts of `cfg`'s
/// shapes over `layers` attention layers.
pub fn dei_param_count(cfg: &AttnConfig, layers: usize) -> DeiParamCount {
    let full = |variant| {
        let c = AttnConfig { variant, enable_m2m: true, enable_isi: true, enable_csi: true, ..cfg.clone() };
        let specs = dei_layout(&c);
        (
            specs.iter().map(ConvSpec::param_count).sum::<usize>(),
            specs.iter().map(ConvSpec::weight_count).sum::<usize>(),
        )
    };
    let (eit, eit_w) = full(Variant::Eit);
    let (eeit, eeit_w) = full(Variant::EEit);
    DeiParamCount {
        layers,
        eit_per_layer: eit,
        eit_per_layer_weights_only: eit_w,
        eeit_per_layer: eeit,
        eeit_per_layer_weights_only: eeit_w,
        eit_total: eit * layers,
        eeit_total: eeit * layers,
    }
}
