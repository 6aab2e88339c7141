//! Hierarchical attention over previous sentences.
//!
//! For every position `t` of the current sentence, a [`HanBlock`]:
//!
//! 1. summarizes each cached sentence `j` into `s_j` by attending over that
//!    sentence's word states with a query derived from `h_t`;
//! 2. attends over the summaries `s_j` with a second query, then applies a
//!    position-wise feed-forward layer, giving the context vector `d_t`;
//! 3. blends `h_t` and `d_t` through an elementwise sigmoid gate.
//!
//! Each attention and the feed-forward layer are followed by layer norm.
//! Cached sentences are plain tensors, so no gradient ever reaches them.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{AttentionMask, Ctx, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{DecoderStates, EncoderStates, ModelConfig};

/// Which hidden states a block queries from, and which cached states it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Encoder states attending over previous encoder states.
    Enc,
    /// Decoder states attending over previous decoder states.
    DecTarget,
    /// Decoder states attending over previous encoder states.
    DecSource,
    /// Decoder states attending over previous alignment vectors.
    DecAlignment,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Enc => "enc",
            Site::DecTarget => "dec_target",
            Site::DecSource => "dec_source",
            Site::DecAlignment => "dec_alignment",
        }
    }

    /// Whether the values come from the source side of the cache.
    pub fn reads_source(self) -> bool {
        matches!(self, Site::Enc | Site::DecSource)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Site::Enc, Site::DecTarget, Site::DecSource, Site::DecAlignment]
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Trace(format!("unknown site {s:?}")))
    }
}

/// Rolling store of the last `k` sentences of one document.
#[derive(Debug, Clone, Default)]
pub struct ContextCache {
    capacity: usize,
    source: VecDeque<EncoderStates>,
    target: VecDeque<DecoderStates>,
}

impl ContextCache {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, source: VecDeque::new(), target: VecDeque::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends one sentence, evicting the oldest beyond capacity.
    pub fn push(&mut self, enc: EncoderStates, dec: Option<DecoderStates>) {
        if self.capacity == 0 {
            return;
        }
        self.source.push_back(enc);
        if self.source.len() > self.capacity {
            self.source.pop_front();
        }
        if let Some(dec) = dec {
            self.target.push_back(dec);
            if self.target.len() > self.capacity {
                self.target.pop_front();
            }
        }
    }

    /// Clears everything; called at document boundaries.
    pub fn reset(&mut self) {
        self.source.clear();
        self.target.clear();
    }

    pub fn source_entries(&self) -> impl ExactSizeIterator<Item = &EncoderStates> {
        self.source.iter()
    }

    pub fn target_entries(&self) -> impl ExactSizeIterator<Item = &DecoderStates> {
        self.target.iter()
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Value tensors (oldest first) a site reads, with their key masks and tokens.
    fn values_for(&self, site: Site) -> Vec<(&Tensor, Vec<bool>, &[usize])> {
        match site {
            Site::Enc | Site::DecSource => {
                self.source.iter().map(|e| (&e.states, e.mask.clone(), e.tokens.as_slice())).collect()
            }
            Site::DecTarget => {
                self.target.iter().map(|d| (&d.states, vec![true; d.states.rows()], d.tokens.as_slice())).collect()
            }
            Site::DecAlignment => {
                self.target.iter().map(|d| (&d.alignment, vec![true; d.alignment.rows()], d.tokens.as_slice())).collect()
            }
        }
    }
}

/// Attention weights behind one context vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub sentence: usize,
    pub position: usize,
    pub site: Site,
    /// Token at `position` of the current sentence.
    pub query_token: usize,
    /// `[heads][k_eff]`, oldest context sentence first.
    pub sentence_weights: Vec<Vec<f64>>,
    /// `[k_eff][heads][len_j]`.
    pub word_weights: Vec<Vec<Vec<f64>>>,
    /// Token ids of each context sentence.
    pub context_tokens: Vec<Vec<usize>>,
}

/// Where traces go while running a block.
pub struct TraceSink<'a> {
    pub sentence: usize,
    pub tokens: &'a [usize],
    pub out: &'a mut Vec<AttentionTrace>,
}

/// Parameters of one hierarchical context block.
#[derive(Debug, Clone)]
pub struct HanBlock {
    pub site_name: String,
    pub word_query: Linear,
    pub sentence_query: Linear,
    pub word_attn: MultiHeadAttention,
    pub sentence_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub word_norm: LayerNorm,
    pub sentence_norm: LayerNorm,
    pub ffn_norm: LayerNorm,
    pub gate_hidden: ParamId,
    pub gate_context: ParamId,
    pub residual: bool,
    d_model: usize,
    /// Test hook: replaces the learned gate with a constant.
    #[doc(hidden)]
    pub gate_override: Option<f64>,
}

impl HanBlock {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str) -> Result<Self> {
        let d = cfg.d_model;
        let h = cfg.han_heads;
        Ok(Self {
            site_name: name.to_string(),
            word_query: Linear::new(store, rng, &format!("{name}.f_w"), d, d, true)?,
            sentence_query: Linear::new(store, rng, &format!("{name}.f_s"), d, d, true)?,
            word_attn: MultiHeadAttention::new(store, rng, &format!("{name}.word_attn"), d, h, cfg.dropout)?,
            sentence_attn: MultiHeadAttention::new(store, rng, &format!("{name}.sent_attn"), d, h, cfg.dropout)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, cfg.d_ff, cfg.dropout)?,
            word_norm: LayerNorm::new(store, rng, &format!("{name}.word_norm"), d)?,
            sentence_norm: LayerNorm::new(store, rng, &format!("{name}.sent_norm"), d)?,
            ffn_norm: LayerNorm::new(store, rng, &format!("{name}.ffn_norm"), d)?,
            gate_hidden: store.add(format!("{name}.gate.W_h"), &[d, d], Init::Zeros, rng)?,
            gate_context: store.add(format!("{name}.gate.W_d"), &[d, d], Init::Zeros, rng)?,
            residual: cfg.han_residual,
            d_model: d,
            gate_override: None,
        })
    }

    /// Parameter ids owned by this block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in [&self.word_query, &self.sentence_query, &self.ffn.inner, &self.ffn.outer] {
            ids.push(l.weight);
            ids.extend(l.bias);
        }
        for a in [&self.word_attn, &self.sentence_attn] {
            for l in [&a.query, &a.key, &a.value, &a.output] {
                ids.push(l.weight);
                ids.extend(l.bias);
            }
        }
        for n in [&self.word_norm, &self.sentence_norm, &self.ffn_norm] {
            ids.extend([n.gain, n.bias]);
        }
        ids.extend([self.gate_hidden, self.gate_context]);
        ids
    }

    /// Summarizes one context sentence for every query position.
    ///
    /// `hidden` is `[len, d]`, `states` is `[len_j, d]`. Returns `s_j` as
    /// `[len, d]` and the word weights `[heads, len, len_j]`.
    pub fn word_level_summary(&self, ctx: &mut Ctx, hidden: Var, states: Var, mask: Option<&AttentionMask>) -> Result<(Var, Tensor)> {
        let q = self.word_query.forward(ctx, hidden)?;
        self.word_summary_with_query(ctx, q, states, mask)
    }

    fn word_summary_with_query(&self, ctx: &mut Ctx, q: Var, states: Var, mask: Option<&AttentionMask>) -> Result<(Var, Tensor)> {
        let (a, w) = self.word_attn.forward(ctx, q, states, states, mask)?;
        let a = if self.residual { ctx.graph.add(a, q)? } else { a };
        Ok((self.word_norm.forward(ctx, a)?, w))
    }

    /// Attends over sentence summaries (each `[len, d]`, oldest first) and
    /// applies the feed-forward layer. Returns `d_t` as `[len, d]` and the
    /// sentence weights `[heads, len, k_eff]`.
    pub fn sentence_level_summary(&self, ctx: &mut Ctx, hidden: Var, summaries: &[Var]) -> Result<(Var, Tensor)> {
        if summaries.is_empty() {
            return Err(Error::invalid("sentence_level_summary", "no sentence summaries"));
        }
        let len = ctx.graph.shape(hidden)[0];
        let d = self.d_model;
        let k = summaries.len();
        let mut stacked = Vec::with_capacity(k);
        for &s in summaries {
            stacked.push(ctx.graph.reshape(s, &[len, 1, d])?);
        }
        let keys = if k == 1 { stacked[0] } else { ctx.graph.concat(&stacked, 1)? };
        let q = self.sentence_query.forward(ctx, hidden)?;
        let q3 = ctx.graph.reshape(q, &[len, 1, d])?;
        let (a, w) = self.sentence_attn.forward(ctx, q3, keys, keys, None)?;
        let a = ctx.graph.reshape(a, &[len, d])?;
        let a = if self.residual { ctx.graph.add(a, q)? } else { a };
        let x = self.sentence_norm.forward(ctx, a)?;
        let f = self.ffn.forward(ctx, x)?;
        let f = if self.residual { ctx.graph.add(f, x)? } else { f };
        let out = self.ffn_norm.forward(ctx, f)?;
        // [heads, len, 1, k] -> [heads, len, k]
        let heads = w.shape()[0];
        Ok((out, w.reshape(&[heads, len, k])?))
    }

    /// `lambda = sigmoid(h W_h + d W_d)`, `h~ = lambda * h + (1 - lambda) * d`.
    pub fn context_gate(&self, ctx: &mut Ctx, hidden: Var, context: Var) -> Result<(Var, Var)> {
        let lambda = match self.gate_override {
            Some(v) => ctx.graph.constant(Tensor::full(ctx.graph.shape(hidden), v)),
            None => {
                let wh = ctx.param(self.gate_hidden);
                let wd = ctx.param(self.gate_context);
                let a = crate::nn::affine(&mut ctx.graph, hidden, wh, None)?;
                let b = crate::nn::affine(&mut ctx.graph, context, wd, None)?;
                let z = ctx.graph.add(a, b)?;
                ctx.graph.sigmoid(z)
            }
        };
        let ones = ctx.graph.constant(Tensor::full(ctx.graph.shape(hidden), 1.0));
        let keep = ctx.graph.mul(lambda, hidden)?;
        let inv = ctx.graph.sub(ones, lambda)?;
        let mix = ctx.graph.mul(inv, context)?;
        Ok((ctx.graph.add(keep, mix)?, lambda))
    }
}

/// Applies `block` at `site` to hidden states `[len, d]`.
///
/// With an empty cache the input var is returned unchanged.
pub fn han_apply(ctx: &mut Ctx, site: Site, hidden: Var, cache: &ContextCache, block: &HanBlock, trace: Option<TraceSink<'_>>) -> Result<Var> {
    let values = cache.values_for(site);
    if values.is_empty() {
        return Ok(hidden);
    }
    let shape = ctx.graph.shape(hidden).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid("han_apply", format!("hidden states must be [len, d], got {shape:?}")));
    }
    let q = block.word_query.forward(ctx, hidden)?;
    let mut summaries = Vec::with_capacity(values.len());
    let mut word_weights = Vec::with_capacity(values.len());
    for (states, mask, _) in &values {
        let v = ctx.graph.constant((*states).clone());
        let mask = if mask.iter().all(|&m| m) { None } else { Some(AttentionMask::keys(mask)) };
        let (s, w) = block.word_summary_with_query(ctx, q, v, mask.as_ref())?;
        summaries.push(s);
        word_weights.push(w);
    }
    let (d, sentence_weights) = block.sentence_level_summary(ctx, hidden, &summaries)?;
    let (out, _) = block.context_gate(ctx, hidden, d)?;

    if let Some(sink) = trace {
        let len = shape[0];
        let heads = sentence_weights.shape()[0];
        let k = values.len();
        for t in 0..len {
            let sw = (0..heads)
                .map(|h| sentence_weights.data()[(h * len + t) * k..(h * len + t + 1) * k].to_vec())
                .collect();
            let ww = word_weights
                .iter()
                .map(|w| {
                    let lj = w.shape()[2];
                    (0..heads).map(|h| w.data()[(h * len + t) * lj..(h * len + t + 1) * lj].to_vec()).collect()
                })
                .collect();
            sink.out.push(AttentionTrace {
                sentence: sink.sentence,
                position: t,
                site,
                query_token: sink.tokens.get(t).copied().unwrap_or(0),
                sentence_weights: sw,
                word_weights: ww,
                context_tokens: values.iter().map(|(_, _, toks)| toks.to_vec()).collect(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn cfg(heads: usize) -> ModelConfig {
        ModelConfig { d_model: 8, n_heads: 2, han_heads: heads, d_ff: 16, dropout: 0.0, k: 3, ..Default::default() }
    }

    fn block(heads: usize) -> (ParamStore, HanBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = HanBlock::new(&cfg(heads), &mut store, &mut rng, "han").unwrap();
        (store, b)
    }

    fn enc(rows: usize, seed: f64) -> EncoderStates {
        let data = (0..rows * 8).map(|i| ((i as f64) * 0.37 + seed).sin()).collect();
        EncoderStates { states: Tensor::new(vec![rows, 8], data).unwrap(), mask: vec![true; rows], tokens: vec![4; rows] }
    }

    fn hidden(ctx: &mut Ctx, rows: usize) -> Var {
        ctx.graph.constant(Tensor::new(vec![rows, 8], (0..rows * 8).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap())
    }

    #[test]
    fn cache_is_fifo_with_capacity() {
        let mut c = ContextCache::new(2);
        for i in 0..3 {
            c.push(enc(1, i as f64), None);
        }
        let firsts: Vec<f64> = c.source_entries().map(|e| e.states.data()[0]).collect();
        assert_eq!(firsts, vec![enc(1, 1.0).states.data()[0], enc(1, 2.0).states.data()[0]]);
        c.reset();
        assert!(c.is_empty());

        let mut c = ContextCache::new(0);
        c.push(enc(1, 0.0), None);
        assert!(c.is_empty());
    }

    #[test]
    fn empty_cache_is_identity() {
        let (store, b) = block(2);
        let mut ctx = Ctx::eval(&store);
        let h = hidden(&mut ctx, 3);
        let out = han_apply(&mut ctx, Site::Enc, h, &ContextCache::new(3), &b, None).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn single_word_context_gets_full_weight() {
        let (store, b) = block(2);
        let mut ctx = Ctx::eval(&store);
        let h = hidden(&mut ctx, 1);
        let s = ctx.graph.constant(enc(1, 0.3).states);
        let (_, w) = b.word_level_summary(&mut ctx, h, s, None).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn identical_words_split_evenly() {
        let (store, b) = block(2);
        let mut ctx = Ctx::eval(&store);
        let h = hidden(&mut ctx, 1);
        let row = enc(1, 0.9).states.data().to_vec();
        let s = ctx.graph.constant(Tensor::from_rows(&[row.clone(), row]).unwrap());
        let (_, w) = b.word_level_summary(&mut ctx, h, s, None).unwrap();
        assert!(w.data().iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn identical_summaries_get_uniform_sentence_weights() {
        let (store, b) = block(4);
        let mut ctx = Ctx::eval(&store);
        let h = hidden(&mut ctx, 2);
        let s = ctx.graph.constant(enc(2, 0.1).states);
        let (d, w) = b.sentence_level_summary(&mut ctx, h, &[s, s, s]).unwrap();
        assert_eq!(ctx.graph.shape(d), &[2, 8]);
        assert!(w.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        let (_, w) = b.sentence_level_summary(&mut ctx, h, &[s]).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn gate_examples() {
        let (store, b) = block(2);
        let mut ctx = Ctx::eval(&store);
        let h = hidden(&mut ctx, 2);
        // d == h gives h for any gate
        let (out, _) = b.context_gate(&mut ctx, h, h).unwrap();
        assert_eq!(ctx.graph.value(out), ctx.graph.value(h));
        // zero-initialized W_h and W_d give lambda = 0.5
        let d = ctx.graph.constant(enc(2, 2.0).states);
        let (out, lambda) = b.context_gate(&mut ctx, h, d).unwrap();
        assert!(ctx.graph.value(lambda).data().iter().all(|&x| x == 0.5));
        let (hv, dv, ov) = (ctx.graph.value(h), ctx.graph.value(d), ctx.graph.value(out));
        for i in 0..hv.numel() {
            assert!((ov.data()[i] - 0.5 * (hv.data()[i] + dv.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_output_is_elementwise_convex() {
        let (mut store, b) = block(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        use rand::Rng;
        for id in [b.gate_hidden, b.gate_context] {
            let t = Tensor::new(vec![8, 8], (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            store.set(id, t).unwrap();
        }
        let mut ctx = Ctx::eval(&store);
        let h = hidden(&mut ctx, 4);
        let d = ctx.graph.constant(enc(4, 1.3).states);
        let (out, _) = b.context_gate(&mut ctx, h, d).unwrap();
        let (hv, dv, ov) = (ctx.graph.value(h), ctx.graph.value(d), ctx.graph.value(out));
        for i in 0..hv.numel() {
            let (lo, hi) = (hv.data()[i].min(dv.data()[i]), hv.data()[i].max(dv.data()[i]));
            assert!(ov.data()[i] >= lo - 1e-12 && ov.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn traces_cover_every_position() {
        let (store, b) = block(2);
        let mut cache = ContextCache::new(3);
        cache.push(enc(3, 0.0), None);
        cache.push(enc(2, 1.0), None);
        let mut ctx = Ctx::eval(&store);
        let h = hidden(&mut ctx, 4);
        let mut traces = Vec::new();
        let toks = [5, 6, 7, 8];
        let sink = TraceSink { sentence: 2, tokens: &toks, out: &mut traces };
        let out = han_apply(&mut ctx, Site::Enc, h, &cache, &b, Some(sink)).unwrap();
        assert_eq!(ctx.graph.shape(out), &[4, 8]);
        assert_eq!(traces.len(), 4);
        for tr in &traces {
            assert_eq!(tr.sentence_weights.len(), 2);
            assert_eq!(tr.word_weights.len(), 2);
            assert_eq!(tr.word_weights[0][0].len(), 3);
            assert_eq!(tr.word_weights[1][1].len(), 2);
            for row in tr.sentence_weights.iter().chain(tr.word_weights.iter().flatten()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(traces[3].query_token, 8);
    }
}
