//! Sentence-level encoder-decoder transformer (post-norm).

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{positional_encoding, AttentionMask, Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::PAD;

/// Where hierarchical context attention is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HanMode {
    /// Plain sentence-level model.
    None,
    /// Context over previous source sentences, applied to encoder output.
    Encoder,
    /// Context over previous decoder states, applied before classification.
    Decoder,
    /// Decoder-side block reading previous encoder states.
    DecoderSource,
    /// Decoder-side block reading previous encoder-decoder attention outputs.
    DecoderAlignment,
    /// Encoder block plus decoder (target) block.
    Joint,
}

impl HanMode {
    pub const ALL: [HanMode; 6] = [
        HanMode::None,
        HanMode::Encoder,
        HanMode::Decoder,
        HanMode::DecoderSource,
        HanMode::DecoderAlignment,
        HanMode::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HanMode::None => "none",
            HanMode::Encoder => "encoder",
            HanMode::Decoder => "decoder",
            HanMode::DecoderSource => "decoder_source",
            HanMode::DecoderAlignment => "decoder_alignment",
            HanMode::Joint => "joint",
        }
    }

    pub fn has_encoder_block(self) -> bool {
        matches!(self, HanMode::Encoder | HanMode::Joint)
    }

    /// The site of the decoder-side block, if any.
    pub fn decoder_site(self) -> Option<crate::han::Site> {
        use crate::han::Site;
        match self {
            HanMode::Decoder | HanMode::Joint => Some(Site::DecTarget),
            HanMode::DecoderSource => Some(Site::DecSource),
            HanMode::DecoderAlignment => Some(Site::DecAlignment),
            HanMode::None | HanMode::Encoder => None,
        }
    }

    /// Whether the context cache must hold previous decoder states.
    pub fn uses_target_context(self) -> bool {
        matches!(self, HanMode::Decoder | HanMode::DecoderAlignment | HanMode::Joint)
    }
}

impl fmt::Display for HanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HanMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown han_mode {s:?}")))
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub max_len: usize,
    /// Number of previous sentences kept as context.
    pub k: usize,
    pub han_mode: HanMode,
    pub han_heads: usize,
    /// Adds residual connections around the context sublayers.
    pub han_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_ff: 128,
            dropout: 0.1,
            vocab_src: 1000,
            vocab_tgt: 1000,
            max_len: 64,
            k: 3,
            han_mode: HanMode::None,
            han_heads: 4,
            han_residual: false,
        }
    }
}

impl ModelConfig {
    /// The original large configuration: 512 wide, 8 heads, 6+6 layers, 30K vocabularies.
    pub fn base() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            n_layers_enc: 6,
            n_layers_dec: 6,
            d_ff: 2048,
            dropout: 0.1,
            vocab_src: 30_000,
            vocab_tgt: 30_000,
            max_len: 256,
            k: 3,
            han_mode: HanMode::Joint,
            han_heads: 8,
            han_residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.han_heads == 0 || self.d_model % self.han_heads != 0 {
            return bad(format!("d_model {} not divisible by han_heads {}", self.d_model, self.han_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.vocab_src < 5 || self.vocab_tgt < 5 {
            return bad("vocabularies need at least the four specials plus one token".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} too small", self.max_len));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        Ok(())
    }

    /// Whether two configs describe the same sentence-level transformer.
    pub fn transformer_compatible(&self, other: &ModelConfig) -> Result<()> {
        let pairs = [
            ("d_model", self.d_model, other.d_model),
            ("n_heads", self.n_heads, other.n_heads),
            ("n_layers_enc", self.n_layers_enc, other.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec, other.n_layers_dec),
            ("d_ff", self.d_ff, other.d_ff),
            ("vocab_src", self.vocab_src, other.vocab_src),
            ("vocab_tgt", self.vocab_tgt, other.vocab_tgt),
            ("max_len", self.max_len, other.max_len),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::Config(format!("{name} mismatch: checkpoint has {a}, model expects {b}")));
            }
        }
        Ok(())
    }
}

/// Last encoder-layer outputs for one source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    /// `[len, d_model]`
    pub states: Tensor,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
    pub tokens: Vec<usize>,
}

/// Last decoder-layer outputs for one target sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStates {
    /// `[len, d_model]`
    pub states: Tensor,
    /// Encoder-decoder attention outputs of the last decoder layer, after the
    /// output projection and before the residual add. Same shape as `states`.
    pub alignment: Tensor,
    /// Decoder input tokens (starting with BOS).
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

/// Encoder outputs still attached to the graph.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    pub states: Var,
    pub mask: Vec<bool>,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodedVars {
    pub states: Var,
    pub alignment: Var,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    d_model: usize,
    max_len: usize,
    dropout: f64,
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out: Linear,
    positions: Tensor,
}

fn truncate(tokens: &[usize], max_len: usize, what: &str) -> Vec<usize> {
    if tokens.len() > max_len {
        log::warn!("{what} of {} tokens truncated to {max_len}", tokens.len());
        tokens[..max_len].to_vec()
    } else {
        tokens.to_vec()
    }
}

impl Transformer {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let src_embed = store.add("src_embed", &[cfg.vocab_src, d], Init::FanIn(d), rng)?;
        let tgt_embed = store.add("tgt_embed", &[cfg.vocab_tgt, d], Init::FanIn(d), rng)?;
        let mut encoder = Vec::new();
        for l in 0..cfg.n_layers_enc {
            let p = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                attn: MultiHeadAttention::new(store, rng, &format!("{p}.self_attn"), d, cfg.n_heads, cfg.dropout)?,
                norm1: LayerNorm::new(store, rng, &format!("{p}.norm1"), d)?,
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, cfg.d_ff, cfg.dropout)?,
                norm2: LayerNorm::new(store, rng, &format!("{p}.norm2"), d)?,
            });
        }
        let mut decoder = Vec::new();
        for l in 0..cfg.n_layers_dec {
            let p = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, rng, &format!("{p}.self_attn"), d, cfg.n_heads, cfg.dropout)?,
                norm1: LayerNorm::new(store, rng, &format!("{p}.norm1"), d)?,
                cross_attn: MultiHeadAttention::new(store, rng, &format!("{p}.cross_attn"), d, cfg.n_heads, cfg.dropout)?,
                norm2: LayerNorm::new(store, rng, &format!("{p}.norm2"), d)?,
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, cfg.d_ff, cfg.dropout)?,
                norm3: LayerNorm::new(store, rng, &format!("{p}.norm3"), d)?,
            });
        }
        if decoder.is_empty() {
            return Err(Error::Config("the decoder needs at least one layer".into()));
        }
        let out = Linear::new(store, rng, "classifier", d, cfg.vocab_tgt, true)?;
        Ok(Self {
            d_model: d,
            max_len: cfg.max_len,
            dropout: cfg.dropout,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out,
            positions: positional_encoding(cfg.max_len, d)?,
        })
    }

    pub fn classifier(&self) -> &Linear {
        &self.out
    }

    fn embed(&self, ctx: &mut Ctx, table: ParamId, tokens: &[usize]) -> Result<Var> {
        let t = ctx.param(table);
        let e = ctx.graph.embedding(t, tokens)?;
        let e = ctx.graph.scale(e, (self.d_model as f64).sqrt());
        let pos = ctx.graph.constant(self.positions.slice_rows(0, tokens.len()));
        let x = ctx.graph.add(e, pos)?;
        ctx.dropout(x, self.dropout)
    }

    /// Runs the encoder stack; overlength input is truncated to `max_len`.
    pub fn encode(&self, ctx: &mut Ctx, tokens: &[usize]) -> Result<EncodedVars> {
        let tokens = truncate(tokens, self.max_len, "source sentence");
        if tokens.is_empty() {
            return Err(Error::invalid("encode", "empty source sentence"));
        }
        let mask: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
        let attn_mask = AttentionMask::keys(&mask);
        let mut x = self.embed(ctx, self.src_embed, &tokens)?;
        for layer in &self.encoder {
            let (a, _) = layer.attn.forward(ctx, x, x, x, Some(&attn_mask))?;
            let a = ctx.dropout(a, self.dropout)?;
            let r = ctx.graph.add(x, a)?;
            x = layer.norm1.forward(ctx, r)?;
            let f = layer.ffn.forward(ctx, x)?;
            let f = ctx.dropout(f, self.dropout)?;
            let r = ctx.graph.add(x, f)?;
            x = layer.norm2.forward(ctx, r)?;
        }
        Ok(EncodedVars { states: x, mask, tokens })
    }

    /// Teacher-forced decoder over `target_in` (BOS-prefixed) attending to
    /// `memory`. Records the last layer's encoder-decoder attention outputs.
    pub fn decode(&self, ctx: &mut Ctx, target_in: &[usize], memory: Var, memory_mask: &[bool]) -> Result<DecodedVars> {
        let tokens = truncate(target_in, self.max_len, "target prefix");
        if tokens.is_empty() {
            return Err(Error::invalid("decode", "empty target input"));
        }
        let self_mask = AttentionMask::causal(&tokens.iter().map(|&t| t != PAD).collect::<Vec<_>>());
        let cross_mask = AttentionMask::keys(memory_mask);
        let mut x = self.embed(ctx, self.tgt_embed, &tokens)?;
        let mut alignment = x;
        for layer in &self.decoder {
            let (a, _) = layer.self_attn.forward(ctx, x, x, x, Some(&self_mask))?;
            let a = ctx.dropout(a, self.dropout)?;
            let r = ctx.graph.add(x, a)?;
            x = layer.norm1.forward(ctx, r)?;
            let (c, _) = layer.cross_attn.forward(ctx, x, memory, memory, Some(&cross_mask))?;
            alignment = c;
            let c = ctx.dropout(c, self.dropout)?;
            let r = ctx.graph.add(x, c)?;
            x = layer.norm2.forward(ctx, r)?;
            let f = layer.ffn.forward(ctx, x)?;
            let f = ctx.dropout(f, self.dropout)?;
            let r = ctx.graph.add(x, f)?;
            x = layer.norm3.forward(ctx, r)?;
        }
        Ok(DecodedVars { states: x, alignment })
    }

    /// Projects hidden states to target-vocabulary logits.
    pub fn classify(&self, ctx: &mut Ctx, hidden: Var) -> Result<Var> {
        self.out.forward(ctx, hidden)
    }
}

impl EncodedVars {
    pub fn detach(&self, ctx: &Ctx) -> EncoderStates {
        EncoderStates {
            states: ctx.graph.value(self.states).clone(),
            mask: self.mask.clone(),
            tokens: self.tokens.clone(),
        }
    }
}

impl DecodedVars {
    pub fn detach(&self, ctx: &Ctx, tokens: &[usize]) -> DecoderStates {
        DecoderStates {
            states: ctx.graph.value(self.states).clone(),
            alignment: ctx.graph.value(self.alignment).clone(),
            tokens: tokens.to_vec(),
        }
    }
}
