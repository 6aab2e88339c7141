//! A transformer plus the context blocks selected by its `han_mode`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::corpus::EncodedPair;
use crate::error::{Error, Result};
use crate::han::{han_apply, AttentionTrace, ContextCache, HanBlock, TraceSink};
use crate::nn::Ctx;
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::{DecoderStates, EncodedVars, EncoderStates, ModelConfig, Transformer};
use crate::vocab::PAD;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub transformer: Transformer,
    pub han_encoder: Option<HanBlock>,
    pub han_decoder: Option<HanBlock>,
}

/// Graph handles of one teacher-forced sentence pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[len_tgt, vocab_tgt]`
    pub logits: Var,
    /// Encoder output before context is mixed in.
    pub encoded: EncodedVars,
    /// Last decoder layer output before context is mixed in.
    pub decoder_states: Var,
    pub alignment: Var,
}

/// Per-call switches for a forward pass.
pub struct Context<'c, 't> {
    pub cache: &'c ContextCache,
    /// When false the context blocks are skipped (sentence-level behavior).
    pub use_han: bool,
    pub sentence: usize,
    pub traces: Option<&'t mut Vec<AttentionTrace>>,
}

impl<'c> Context<'c, '_> {
    pub fn off(cache: &'c ContextCache) -> Self {
        Self { cache, use_han: false, sentence: 0, traces: None }
    }

    pub fn on(cache: &'c ContextCache, sentence: usize) -> Self {
        Self { cache, use_han: true, sentence, traces: None }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let transformer = Transformer::new(&config, &mut store, &mut rng)?;
        let han_encoder = if config.han_mode.has_encoder_block() {
            Some(HanBlock::new(&config, &mut store, &mut rng, "han_enc")?)
        } else {
            None
        };
        let han_decoder = match config.han_mode.decoder_site() {
            Some(_) => Some(HanBlock::new(&config, &mut store, &mut rng, "han_dec")?),
            None => None,
        };
        Ok(Self { config, store, transformer, han_encoder, han_decoder })
    }

    pub fn cache(&self) -> ContextCache {
        ContextCache::new(self.config.k)
    }

    /// Copies every parameter whose name also exists in `other`. Returns the
    /// names that kept their fresh initialization.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<Vec<String>> {
        let mut fresh = Vec::new();
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            match other.id(&name) {
                Some(src) => self.store.set(id, other.value(src).clone()).map_err(|e| {
                    Error::Checkpoint(format!("parameter {name}: {e}"))
                })?,
                None => fresh.push(name),
            }
        }
        Ok(fresh)
    }

    /// Encoder pass; returns the raw encoder output and the memory handed to
    /// the decoder (context-mixed when an encoder block is active).
    pub fn encode(&self, ctx: &mut Ctx, source: &[usize], c: &mut Context) -> Result<(EncodedVars, Var)> {
        let enc = self.transformer.encode(ctx, source)?;
        let memory = match (&self.han_encoder, c.use_han) {
            (Some(block), true) => {
                let sink = c.traces.as_deref_mut().map(|out| TraceSink { sentence: c.sentence, tokens: &enc.tokens, out });
                han_apply(ctx, crate::han::Site::Enc, enc.states, c.cache, block, sink)?
            }
            _ => enc.states,
        };
        Ok((enc, memory))
    }

    /// Decoder pass over `target_in`; returns (raw states, alignment, logits).
    pub fn decode(&self, ctx: &mut Ctx, target_in: &[usize], memory: Var, memory_mask: &[bool], c: &mut Context) -> Result<(Var, Var, Var)> {
        let dec = self.transformer.decode(ctx, target_in, memory, memory_mask)?;
        let hidden = match (&self.han_decoder, self.config.han_mode.decoder_site(), c.use_han) {
            (Some(block), Some(site), true) => {
                let sink = c.traces.as_deref_mut().map(|out| TraceSink { sentence: c.sentence, tokens: target_in, out });
                han_apply(ctx, site, dec.states, c.cache, block, sink)?
            }
            _ => dec.states,
        };
        let logits = self.transformer.classify(ctx, hidden)?;
        Ok((dec.states, dec.alignment, logits))
    }

    pub fn forward(&self, ctx: &mut Ctx, source: &[usize], target_in: &[usize], c: &mut Context) -> Result<Forward> {
        let (encoded, memory) = self.encode(ctx, source, c)?;
        let (decoder_states, alignment, logits) = self.decode(ctx, target_in, memory, &encoded.mask, c)?;
        Ok(Forward { logits, encoded, decoder_states, alignment })
    }

    /// Smoothed cross-entropy of one pair plus its non-pad token count.
    pub fn pair_loss(&self, ctx: &mut Ctx, pair: &EncodedPair, smoothing: f64, c: &mut Context) -> Result<(Var, Forward, usize)> {
        let f = self.forward(ctx, &pair.source, &pair.target_in, c)?;
        let targets = &pair.target_out[..pair.target_out.len().min(self.config.max_len)];
        let loss = ctx.graph.cross_entropy_smoothed(f.logits, targets, smoothing, PAD)?;
        let count = targets.iter().filter(|&&t| t != PAD).count();
        Ok((loss, f, count))
    }

    /// Detached states of a finished pass, ready to push into a cache.
    pub fn cache_entry(&self, ctx: &Ctx, f: &Forward, target_in: &[usize]) -> (EncoderStates, Option<DecoderStates>) {
        let enc = f.encoded.detach(ctx);
        let dec = self.config.han_mode.uses_target_context().then(|| DecoderStates {
            states: ctx.graph.value(f.decoder_states).clone(),
            alignment: ctx.graph.value(f.alignment).clone(),
            tokens: target_in[..target_in.len().min(self.config.max_len)].to_vec(),
        });
        (enc, dec)
    }

    /// Evaluation forward of one pair; returns logits and the cache entry.
    pub fn eval_pair(&self, pair: &EncodedPair, c: &mut Context) -> Result<(Tensor, (EncoderStates, Option<DecoderStates>))> {
        let mut ctx = Ctx::eval(&self.store);
        let f = self.forward(&mut ctx, &pair.source, &pair.target_in, c)?;
        let entry = self.cache_entry(&ctx, &f, &pair.target_in);
        Ok((ctx.graph.value(f.logits).clone(), entry))
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let v = logits.last_dim();
    logits
        .data()
        .chunks(v)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::HanMode;

    fn cfg(mode: HanMode) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 16,
            dropout: 0.0,
            vocab_src: 9,
            vocab_tgt: 9,
            max_len: 16,
            k: 2,
            han_mode: mode,
            han_heads: 2,
            han_residual: false,
        }
    }

    fn pair(s: &[usize], t: &[usize]) -> EncodedPair {
        let mut target_in = vec![crate::vocab::BOS];
        target_in.extend(t);
        let mut target_out = t.to_vec();
        target_out.push(crate::vocab::EOS);
        EncodedPair { source: s.to_vec(), target_in, target_out }
    }

    #[test]
    fn blocks_follow_mode() {
        for mode in HanMode::ALL {
            let m = Model::new(cfg(mode), 0).unwrap();
            assert_eq!(m.han_encoder.is_some(), mode.has_encoder_block(), "{mode}");
            assert_eq!(m.han_decoder.is_some(), mode.decoder_site().is_some(), "{mode}");
        }
    }

    #[test]
    fn load_matching_reports_fresh_params() {
        let base = Model::new(cfg(HanMode::None), 1).unwrap();
        let mut joint = Model::new(cfg(HanMode::Joint), 2).unwrap();
        let fresh = joint.load_matching(&base.store).unwrap();
        assert!(!fresh.is_empty());
        assert!(fresh.iter().all(|n| n.starts_with("han_")));
        for (_, p) in base.store.iter() {
            let id = joint.store.id(&p.name).unwrap();
            assert_eq!(joint.store.value(id), &p.value);
        }
    }

    #[test]
    fn load_matching_rejects_shape_mismatch() {
        let base = Model::new(cfg(HanMode::None), 1).unwrap();
        let mut other = Model::new(ModelConfig { vocab_tgt: 11, ..cfg(HanMode::None) }, 1).unwrap();
        assert!(other.load_matching(&base.store).is_err());
    }

    #[test]
    fn every_mode_runs_with_context() {
        let p = pair(&[4, 5, 6, 3], &[5, 6]);
        for mode in HanMode::ALL {
            let m = Model::new(cfg(mode), 3).unwrap();
            let mut cache = m.cache();
            let mut traces = Vec::new();
            for s in 0..3 {
                let mut c = Context { cache: &cache, use_han: true, sentence: s, traces: Some(&mut traces) };
                let (logits, entry) = m.eval_pair(&p, &mut c).unwrap();
                assert_eq!(logits.shape(), &[3, 9]);
                assert!(logits.is_finite());
                cache.push(entry.0, entry.1);
            }
            assert_eq!(traces.is_empty(), mode == HanMode::None, "{mode}");
        }
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
