//! Instance- and template-oriented prefixes, the event-guided gate, and
//! the ablation variants that rewire them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DegapError, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::transformer::{ForwardCtx, ModelConfig, PrefixKV, PrefixSource, Side};

/// Fallback template-prefix key used for unseen types under `Tst`.
pub const FALLBACK_TYPE: &str = "__fallback__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// One shared prefix family for both passes.
    #[serde(rename = "sp")]
    SharedPrefix,
    #[serde(rename = "only-iop")]
    OnlyIop,
    #[serde(rename = "only-top")]
    OnlyTop,
    /// No prefixes at all: the plain backbone.
    #[serde(rename = "none")]
    NoPrefix,
    /// Template prefixes keyed by event type.
    #[serde(rename = "tst")]
    Tst,
    /// Ungated prefixes, 1.5× longer.
    #[serde(rename = "no-egag")]
    NoGating,
    /// Gate guided by the sequence-start token instead of the trigger/type.
    #[serde(rename = "s-guided")]
    SentenceGuided,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::SharedPrefix,
        Variant::OnlyIop,
        Variant::OnlyTop,
        Variant::NoPrefix,
        Variant::Tst,
        Variant::NoGating,
        Variant::SentenceGuided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SharedPrefix => "sp",
            Variant::OnlyIop => "only-iop",
            Variant::OnlyTop => "only-top",
            Variant::NoPrefix => "none",
            Variant::Tst => "tst",
            Variant::NoGating => "no-egag",
            Variant::SentenceGuided => "s-guided",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "DEGAP",
            Variant::SharedPrefix => "DEGAP-SP",
            Variant::OnlyIop => "only IOP (w/o TOP)",
            Variant::OnlyTop => "only TOP (w/o IOP)",
            Variant::NoPrefix => "w/o DEGAP",
            Variant::Tst => "DEGAP-TST",
            Variant::NoGating => "w/o EGAG",
            Variant::SentenceGuided => "DEGAP-S",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = DegapError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                DegapError::config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Instance-oriented, consulted by the context pass.
    Ins,
    /// Template-oriented, consulted by the template pass.
    Tem,
}

impl Family {
    pub fn tag(self) -> &'static str {
        match self {
            Family::Ins => "ins",
            Family::Tem => "tem",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuideMode {
    /// Pool the trigger (context) or type (template) positions.
    Event,
    /// Use the sequence-start row only.
    SequenceStart,
}

/// Effective prefix wiring for a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wiring {
    pub variant: Variant,
    pub ins_len: usize,
    pub tem_len: usize,
    pub gated: bool,
    pub guide: GuideMode,
    /// The template pass reuses the instance family.
    pub shared: bool,
    pub per_type_top: bool,
}

/// `round(1.5 · len)` with ties rounded up.
pub fn expanded_len(len: usize) -> usize {
    (3 * len).div_ceil(2)
}

impl Wiring {
    pub fn resolve(cfg: &ModelConfig) -> Self {
        let mut w = Wiring {
            variant: cfg.variant,
            ins_len: cfg.len_ins,
            tem_len: cfg.len_tem,
            gated: true,
            guide: GuideMode::Event,
            shared: false,
            per_type_top: false,
        };
        match cfg.variant {
            Variant::Full => {}
            Variant::SharedPrefix => {
                w.shared = true;
                w.tem_len = w.ins_len;
            }
            Variant::OnlyIop => w.tem_len = 0,
            Variant::OnlyTop => w.ins_len = 0,
            Variant::NoPrefix => {
                w.ins_len = 0;
                w.tem_len = 0;
            }
            Variant::Tst => w.per_type_top = true,
            Variant::NoGating => {
                w.gated = false;
                w.ins_len = expanded_len(w.ins_len);
                w.tem_len = expanded_len(w.tem_len);
            }
            Variant::SentenceGuided => w.guide = GuideMode::SequenceStart,
        }
        w
    }

    /// Parameter family consulted for `family`, or `None` when disabled.
    pub fn route(&self, family: Family) -> Option<Family> {
        let routed = if self.shared { Family::Ins } else { family };
        (self.len(routed) > 0).then_some(routed)
    }

    pub fn len(&self, family: Family) -> usize {
        match family {
            Family::Ins => self.ins_len,
            Family::Tem => self.tem_len,
        }
    }
}

/// Returns `base` switched to `variant`; the bank built from it carries the
/// variant's wiring.
pub fn make_variant(base: &ModelConfig, variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        ..base.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixPair {
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateParams {
    pub w: ParamId,
    pub lambda: ParamId,
}

#[derive(Debug, Clone, Default)]
struct SideLayers<T> {
    enc: Vec<T>,
    dec: Vec<T>,
}

impl<T: Copy> SideLayers<T> {
    fn get(&self, side: Side, layer: usize) -> Result<T> {
        let v = match side {
            Side::Encoder => &self.enc,
            Side::Decoder => &self.dec,
        };
        v.get(layer)
            .copied()
            .ok_or_else(|| DegapError::contract(format!("no {} prefix layer {layer}", side.tag())))
    }

    fn all(&self) -> impl Iterator<Item = T> + '_ {
        self.enc.iter().chain(&self.dec).copied()
    }
}

fn init_layers<T>(
    cfg: &ModelConfig,
    mut make: impl FnMut(Side, usize) -> Result<T>,
) -> Result<SideLayers<T>> {
    Ok(SideLayers {
        enc: (0..cfg.n_enc_layers).map(|i| make(Side::Encoder, i)).collect::<Result<_>>()?,
        dec: (0..cfg.n_dec_layers).map(|i| make(Side::Decoder, i)).collect::<Result<_>>()?,
    })
}

fn init_pairs(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng, scope: &str, len: usize) -> Result<SideLayers<PrefixPair>> {
    let m = cfg.d_model;
    init_layers(cfg, |side, i| {
        let stem = format!("prefix.{}.{scope}.layer.{i}", side.tag());
        Ok(PrefixPair {
            key: store.add(format!("{stem}.key"), Tensor::randn(&[len, m], cfg.init_std, rng))?,
            value: store.add(format!("{stem}.val"), Tensor::randn(&[len, m], cfg.init_std, rng))?,
        })
    })
}

fn init_gates(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng, family: Family, len: usize) -> Result<SideLayers<GateParams>> {
    let m = cfg.d_model;
    init_layers(cfg, |side, i| {
        let stem = format!("gate.{}.{}.layer.{i}", side.tag(), family.tag());
        Ok(GateParams {
            w: store.add(format!("{stem}.W"), Tensor::randn(&[m, len], cfg.init_std, rng))?,
            lambda: store.add(format!("{stem}.lambda"), Tensor::scalar(1.0))?,
        })
    })
}

#[derive(Debug, Clone)]
enum TemplatePrefixes {
    Disabled,
    Shared(SideLayers<PrefixPair>),
    PerType(BTreeMap<String, SideLayers<PrefixPair>>),
}

/// All prefix and gate parameter handles of one model.
#[derive(Debug, Clone)]
pub struct PrefixBank {
    pub wiring: Wiring,
    ins: Option<SideLayers<PrefixPair>>,
    tem: TemplatePrefixes,
    ins_gates: Option<SideLayers<GateParams>>,
    tem_gates: Option<SideLayers<GateParams>>,
}

impl PrefixBank {
    /// Registers the variant's prefix (and gate) parameters in `store`.
    /// Under `Tst`, `event_types` get one template family each plus a
    /// fallback.
    pub fn init(cfg: &ModelConfig, event_types: &[String], store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let wiring = Wiring::resolve(cfg);
        let ins = if wiring.ins_len > 0 {
            Some(init_pairs(cfg, store, rng, "ins", wiring.ins_len)?)
        } else {
            None
        };
        let tem = if wiring.shared || wiring.tem_len == 0 {
            TemplatePrefixes::Disabled
        } else if wiring.per_type_top {
            let mut map = BTreeMap::new();
            for name in event_types.iter().map(String::as_str).chain([FALLBACK_TYPE]) {
                let scope = if name == FALLBACK_TYPE {
                    "tem.fallback".to_owned()
                } else {
                    format!("tem.type.{name}")
                };
                map.insert(name.to_owned(), init_pairs(cfg, store, rng, &scope, wiring.tem_len)?);
            }
            TemplatePrefixes::PerType(map)
        } else {
            TemplatePrefixes::Shared(init_pairs(cfg, store, rng, "tem", wiring.tem_len)?)
        };
        let (mut ins_gates, mut tem_gates) = (None, None);
        if wiring.gated {
            if ins.is_some() {
                ins_gates = Some(init_gates(cfg, store, rng, Family::Ins, wiring.ins_len)?);
            }
            if !matches!(tem, TemplatePrefixes::Disabled) {
                tem_gates = Some(init_gates(cfg, store, rng, Family::Tem, wiring.tem_len)?);
            }
        }
        Ok(Self {
            wiring,
            ins,
            tem,
            ins_gates,
            tem_gates,
        })
    }

    /// Key/value parameters for one layer. Under `Tst`, unseen types get
    /// the fallback family.
    pub fn select_layer_prefix(&self, side: Side, layer: usize, family: Family, event_type: &str) -> Result<PrefixPair> {
        let disabled = || {
            DegapError::contract(format!(
                "{} prefix family consulted but disabled under variant {}",
                family.tag(),
                self.wiring.variant
            ))
        };
        match self.wiring.route(family).ok_or_else(disabled)? {
            Family::Ins => self.ins.as_ref().ok_or_else(disabled)?.get(side, layer),
            Family::Tem => match &self.tem {
                TemplatePrefixes::Disabled => Err(disabled()),
                TemplatePrefixes::Shared(layers) => layers.get(side, layer),
                TemplatePrefixes::PerType(map) => map
                    .get(event_type)
                    .or_else(|| map.get(FALLBACK_TYPE))
                    .ok_or_else(disabled)?
                    .get(side, layer),
            },
        }
    }

    pub fn gate(&self, side: Side, layer: usize, family: Family) -> Result<Option<GateParams>> {
        let Some(routed) = self.wiring.route(family) else {
            return Ok(None);
        };
        let gates = match routed {
            Family::Ins => &self.ins_gates,
            Family::Tem => &self.tem_gates,
        };
        gates.as_ref().map(|g| g.get(side, layer)).transpose()
    }

    pub fn is_enabled(&self, family: Family) -> bool {
        self.wiring.route(family).is_some()
    }

    /// Every λ handle.
    pub fn lambdas(&self) -> Vec<ParamId> {
        self.gate_params().into_iter().map(|g| g.lambda).collect()
    }

    pub fn gate_params(&self) -> Vec<GateParams> {
        [&self.ins_gates, &self.tem_gates]
            .into_iter()
            .flatten()
            .flat_map(|g| g.all().collect::<Vec<_>>())
            .collect()
    }

    pub fn prefix_params(&self) -> Vec<PrefixPair> {
        let mut out: Vec<PrefixPair> = self.ins.iter().flat_map(|l| l.all().collect::<Vec<_>>()).collect();
        match &self.tem {
            TemplatePrefixes::Disabled => {}
            TemplatePrefixes::Shared(l) => out.extend(l.all()),
            TemplatePrefixes::PerType(map) => out.extend(map.values().flat_map(|l| l.all().collect::<Vec<_>>())),
        }
        out
    }

    /// Sets every λ to `value` and freezes it.
    pub fn freeze_lambdas(&self, store: &mut ParamStore, value: f64) {
        for id in self.lambdas() {
            store.get_mut(id).data[0] = value;
            store.set_trainable(id, false);
        }
    }

    /// View used by one encoding pass.
    pub fn view<'b>(&'b self, family: Family, event_type: &'b str, guide_positions: &'b [usize]) -> PrefixView<'b> {
        PrefixView {
            bank: self,
            family,
            event_type,
            guide_positions,
        }
    }
}

/// `a = sigmoid(h · W)`; `h` is `[m]`, `W` is `[m×len]`, `a` is `[len]`.
pub fn gate_weights(tape: &mut Tape, h_guide: Var, w: Var) -> Result<Var> {
    let m = tape.value(h_guide).len();
    if tape.shape(w).len() != 2 || tape.rows(w) != m {
        return Err(DegapError::Dimension {
            op: "gate_weights",
            lhs: tape.shape(h_guide).to_vec(),
            rhs: tape.shape(w).to_vec(),
        });
    }
    let len = tape.cols(w);
    let h = tape.reshape(h_guide, vec![1, m])?;
    let logits = tape.matmul(h, w)?;
    let a = tape.sigmoid(logits);
    if let Some(bad) = tape.value(a).iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(DegapError::contract(format!("gate weight {bad} outside (0, 1)")));
    }
    tape.reshape(a, vec![len])
}

/// `Prefix' = λ·a ⊙ Prefix` applied row-wise to both keys and values.
pub fn guide_prefix(tape: &mut Tape, key: Var, value: Var, a: Var, lambda: Var) -> Result<PrefixKV> {
    let weights = tape.scale_by(a, lambda)?;
    Ok(PrefixKV {
        key: tape.scale_rows(key, weights)?,
        value: tape.scale_rows(value, weights)?,
    })
}

/// Prefix source for one pass: a family, the event type (for per-type
/// template prefixes) and the positions pooled into the guide vector.
#[derive(Debug, Clone, Copy)]
pub struct PrefixView<'b> {
    bank: &'b PrefixBank,
    family: Family,
    event_type: &'b str,
    guide_positions: &'b [usize],
}

impl PrefixSource for PrefixView<'_> {
    fn prefix_for_layer(&self, ctx: &mut ForwardCtx<'_>, side: Side, layer: usize, hidden: Var) -> Result<Option<PrefixKV>> {
        if !self.bank.is_enabled(self.family) {
            return Ok(None);
        }
        let pair = self.bank.select_layer_prefix(side, layer, self.family, self.event_type)?;
        let key = ctx.param(pair.key);
        let value = ctx.param(pair.value);
        let Some(gate) = self.bank.gate(side, layer, self.family)? else {
            return Ok(Some(PrefixKV { key, value }));
        };
        let positions: &[usize] = match self.bank.wiring.guide {
            GuideMode::Event => self.guide_positions,
            GuideMode::SequenceStart => &[0],
        };
        let h = ctx.tape.mean_pool_rows(hidden, positions)?;
        let w = ctx.param(gate.w);
        let lambda = ctx.param(gate.lambda);
        let a = gate_weights(ctx.tape, h, w)?;
        guide_prefix(ctx.tape, key, value, a, lambda).map(Some)
    }
}
