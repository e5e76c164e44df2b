//! A small post-LN encoder–decoder whose self-attention blocks accept
//! extra key/value rows.

use serde::{Deserialize, Serialize};

use crate::data::TemplateVariant;
use crate::error::{DegapError, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::prefixes::Variant;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    /// Filled from the ontology vocabulary when left at 0.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Candidate spans satisfy `0 < end - start < max_span_len`.
    pub max_span_len: usize,
    pub len_ins: usize,
    pub len_tem: usize,
    pub dropout_rate: f64,
    pub init_std: f64,
    pub layer_norm_eps: f64,
    pub variant: Variant,
    pub template_variant: TemplateVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 1,
            ffn_dim: 64,
            vocab_size: 0,
            max_seq_len: 96,
            max_span_len: 10,
            len_ins: 8,
            len_tem: 4,
            dropout_rate: 0.0,
            init_std: 0.02,
            layer_norm_eps: crate::numerics::DEFAULT_LAYER_NORM_EPS,
            variant: Variant::Full,
            template_variant: TemplateVariant::TypePart,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(DegapError::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_span_len < 2 {
            return Err(DegapError::config("max_span_len must be at least 2"));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.ffn_dim == 0 {
            return Err(DegapError::config("vocab_size, max_seq_len and ffn_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(DegapError::config("dropout_rate must lie in [0, 1)"));
        }
        if !(self.init_std > 0.0 && self.layer_norm_eps > 0.0) {
            return Err(DegapError::config("init_std and layer_norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Key/value rows prepended to a self-attention block. Both are `[len×m]`.
#[derive(Debug, Clone, Copy)]
pub struct PrefixKV {
    pub key: Var,
    pub value: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn tag(self) -> &'static str {
        match self {
            Side::Encoder => "enc",
            Side::Decoder => "dec",
        }
    }
}

/// Supplies the (already gated) prefix for each self-attention layer.
///
/// `hidden` is the layer input, i.e. the previous layer's output (or the
/// embeddings for the first encoder layer).
pub trait PrefixSource {
    fn prefix_for_layer(&self, ctx: &mut ForwardCtx<'_>, side: Side, layer: usize, hidden: Var) -> Result<Option<PrefixKV>>;
}

/// Plain transformer without prefixes.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPrefix;

impl PrefixSource for NoPrefix {
    fn prefix_for_layer(&self, _: &mut ForwardCtx<'_>, _: Side, _: usize, _: Var) -> Result<Option<PrefixKV>> {
        Ok(None)
    }
}

/// Per-forward state: the tape, read-only parameters, optional dropout.
pub struct ForwardCtx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    dropout: Option<(f64, &'a mut Rng)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            dropout: None,
        }
    }

    pub fn with_dropout(mut self, rate: f64, rng: &'a mut Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, rng));
        }
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - *rate);
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rand::Rng::random_bool(*rng, *rate) { 0.0 } else { keep })
            .collect();
        self.tape.mul_const(x, mask)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: AttentionParams,
    pub ffn: FeedForwardParams,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: FeedForwardParams,
}

/// Parameter handles of the backbone. Names follow
/// `embed.{token,position}`, `{enc,dec}.layer.<i>.{self_attn,cross_attn,ffn}.<w>`.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub eps: f64,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
}

fn init_attention(store: &mut ParamStore, prefix: &str, m: usize, std: f64, rng: &mut Rng) -> Result<AttentionParams> {
    let mut mat = |name: &str, rng: &mut Rng| store.add(format!("{prefix}.{name}"), Tensor::randn(&[m, m], std, rng));
    let wq = mat("wq", rng)?;
    let wk = mat("wk", rng)?;
    let wv = mat("wv", rng)?;
    let wo = mat("wo", rng)?;
    Ok(AttentionParams {
        wq,
        wk,
        wv,
        wo,
        norm_gamma: store.add(format!("{prefix}.norm.gamma"), Tensor::filled(&[m], 1.0))?,
        norm_beta: store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[m]))?,
    })
}

fn init_ffn(store: &mut ParamStore, prefix: &str, m: usize, f: usize, std: f64, rng: &mut Rng) -> Result<FeedForwardParams> {
    Ok(FeedForwardParams {
        w1: store.add(format!("{prefix}.w1"), Tensor::randn(&[m, f], std, rng))?,
        b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[f]))?,
        w2: store.add(format!("{prefix}.w2"), Tensor::randn(&[f, m], std, rng))?,
        b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[m]))?,
        norm_gamma: store.add(format!("{prefix}.norm.gamma"), Tensor::filled(&[m], 1.0))?,
        norm_beta: store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[m]))?,
    })
}

impl Transformer {
    pub fn init(config: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (m, std) = (config.d_model, config.init_std);
        let token_embed = store.add("embed.token", Tensor::randn(&[config.vocab_size, m], std, rng))?;
        let pos_embed = store.add("embed.position", Tensor::randn(&[config.max_seq_len, m], std, rng))?;
        let encoder = (0..config.n_enc_layers)
            .map(|i| {
                let p = format!("enc.layer.{i}");
                Ok(EncoderLayer {
                    self_attn: init_attention(store, &format!("{p}.self_attn"), m, std, rng)?,
                    ffn: init_ffn(store, &format!("{p}.ffn"), m, config.ffn_dim, std, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let decoder = (0..config.n_dec_layers)
            .map(|i| {
                let p = format!("dec.layer.{i}");
                Ok(DecoderLayer {
                    self_attn: init_attention(store, &format!("{p}.self_attn"), m, std, rng)?,
                    cross_attn: init_attention(store, &format!("{p}.cross_attn"), m, std, rng)?,
                    ffn: init_ffn(store, &format!("{p}.ffn"), m, config.ffn_dim, std, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            d_model: m,
            n_heads: config.n_heads,
            max_seq_len: config.max_seq_len,
            vocab_size: config.vocab_size,
            eps: config.layer_norm_eps,
            token_embed,
            pos_embed,
            encoder,
            decoder,
        })
    }

    /// Token embedding plus learned position embedding, `[n×m]`.
    pub fn embed_tokens(&self, ctx: &mut ForwardCtx<'_>, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.max_seq_len {
            return Err(DegapError::Length {
                len: ids.len(),
                max: self.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(DegapError::contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = ctx.param(self.token_embed);
        let positions = ctx.param(self.pos_embed);
        let tok = ctx.tape.embedding(table, ids)?;
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let pos = ctx.tape.embedding(positions, &pos_ids)?;
        let sum = ctx.tape.add(tok, pos)?;
        ctx.dropout(sum)
    }

    /// Multi-head scaled dot-product attention before the output residual.
    /// Queries come from `queries`; keys/values from `source`, with the
    /// prefix rows stacked in front of the projected source rows.
    fn attend(&self, ctx: &mut ForwardCtx<'_>, queries: Var, source: Var, p: &AttentionParams, prefix: Option<PrefixKV>) -> Result<Var> {
        let m = self.d_model;
        if ctx.tape.cols(queries) != m || ctx.tape.cols(source) != m {
            return Err(DegapError::config(format!(
                "attention inputs must have {m} columns, got {:?} and {:?}",
                ctx.tape.shape(queries),
                ctx.tape.shape(source)
            )));
        }
        let (wq, wk, wv, wo) = (ctx.param(p.wq), ctx.param(p.wk), ctx.param(p.wv), ctx.param(p.wo));
        let q = ctx.tape.matmul(queries, wq)?;
        let mut k = ctx.tape.matmul(source, wk)?;
        let mut v = ctx.tape.matmul(source, wv)?;
        if let Some(prefix) = prefix {
            if ctx.tape.rows(prefix.key) != ctx.tape.rows(prefix.value) {
                return Err(DegapError::Dimension {
                    op: "prefix",
                    lhs: ctx.tape.shape(prefix.key).to_vec(),
                    rhs: ctx.tape.shape(prefix.value).to_vec(),
                });
            }
            if ctx.tape.rows(prefix.key) > 0 {
                k = ctx.tape.concat_rows(prefix.key, k)?;
                v = ctx.tape.concat_rows(prefix.value, v)?;
            }
        }
        let dh = m / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    ctx.tape.slice_cols(q, h * dh, dh)?,
                    ctx.tape.slice_cols(k, h * dh, dh)?,
                    ctx.tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = ctx.tape.matmul_t(qh, kh)?;
            let scores = ctx.tape.scale(scores, scale);
            let weights = ctx.tape.softmax_rows(scores);
            heads.push(ctx.tape.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { ctx.tape.concat_cols(&heads)? };
        let out = ctx.tape.matmul(merged, wo)?;
        ctx.dropout(out)
    }

    fn residual_norm(&self, ctx: &mut ForwardCtx<'_>, update: Var, input: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let sum = ctx.tape.add(update, input)?;
        let (g, b) = (ctx.param(gamma), ctx.param(beta));
        ctx.tape.layer_norm(sum, g, b, self.eps)
    }

    /// `LayerNorm(MHSA(prefix ⊕ H)[|prefix|..] + H)`: only the rows of `h`
    /// issue queries, so the output keeps exactly `n` rows.
    pub fn prefixed_self_attention(&self, ctx: &mut ForwardCtx<'_>, h: Var, p: &AttentionParams, prefix: Option<PrefixKV>) -> Result<Var> {
        if ctx.tape.rows(h) == 0 {
            return Err(DegapError::contract("self-attention over an empty sequence"));
        }
        let update = self.attend(ctx, h, h, p, prefix)?;
        self.residual_norm(ctx, update, h, p.norm_gamma, p.norm_beta)
    }

    /// Decoder cross-attention; never receives prefixes.
    pub fn cross_attention(&self, ctx: &mut ForwardCtx<'_>, h: Var, h_src: Var, p: &AttentionParams) -> Result<Var> {
        if ctx.tape.rows(h) == 0 || ctx.tape.rows(h_src) == 0 {
            return Err(DegapError::contract("cross-attention over an empty sequence"));
        }
        let update = self.attend(ctx, h, h_src, p, None)?;
        self.residual_norm(ctx, update, h, p.norm_gamma, p.norm_beta)
    }

    pub fn feed_forward(&self, ctx: &mut ForwardCtx<'_>, h: Var, p: &FeedForwardParams) -> Result<Var> {
        let (w1, b1, w2, b2) = (ctx.param(p.w1), ctx.param(p.b1), ctx.param(p.w2), ctx.param(p.b2));
        let x = ctx.tape.matmul(h, w1)?;
        let x = ctx.tape.add_row(x, b1)?;
        let x = ctx.tape.gelu(x);
        let x = ctx.tape.matmul(x, w2)?;
        let x = ctx.tape.add_row(x, b2)?;
        let x = ctx.dropout(x)?;
        self.residual_norm(ctx, x, h, p.norm_gamma, p.norm_beta)
    }

    pub fn encoder_forward(&self, ctx: &mut ForwardCtx<'_>, ids: &[usize], prefixes: &dyn PrefixSource) -> Result<Var> {
        let mut h = self.embed_tokens(ctx, ids)?;
        for (i, layer) in self.encoder.iter().enumerate() {
            let prefix = prefixes.prefix_for_layer(ctx, Side::Encoder, i, h)?;
            h = self.prefixed_self_attention(ctx, h, &layer.self_attn, prefix)?;
            h = self.feed_forward(ctx, h, &layer.ffn)?;
        }
        Ok(h)
    }

    /// Non-causal decoder: prefixed self-attention, cross-attention over
    /// `h_cross`, feed-forward.
    pub fn decoder_forward(&self, ctx: &mut ForwardCtx<'_>, h_in: Var, h_cross: Var, prefixes: &dyn PrefixSource) -> Result<Var> {
        let mut h = h_in;
        for (i, layer) in self.decoder.iter().enumerate() {
            let prefix = prefixes.prefix_for_layer(ctx, Side::Decoder, i, h)?;
            h = self.prefixed_self_attention(ctx, h, &layer.self_attn, prefix)?;
            h = self.cross_attention(ctx, h, h_cross, &layer.cross_attn)?;
            h = self.feed_forward(ctx, h, &layer.ffn)?;
        }
        Ok(h)
    }
}
