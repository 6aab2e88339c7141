//! Two-stage training: sentence-level first, then the whole network with
//! document context.

use std::collections::HashMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{plan_batches, EncodedDocument};
use crate::error::{Error, Result};
use crate::han::ContextCache;
use crate::model::{argmax_rows, Context, Model};
use crate::nn::Ctx;
use crate::optim::{clip_grad_norm, lr_schedule, Adam};
use crate::param::ParamStore;
use crate::transformer::{HanMode, ModelConfig};
use crate::vocab::PAD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub max_tokens_per_step: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Steps between dev evaluations and periodic checkpoints; 0 disables.
    pub checkpoint_interval: u64,
    pub stage: u8,
    /// Multiplies the scheduled learning rate.
    pub lr_scale: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 4000,
            max_steps: 1000,
            max_tokens_per_step: 500,
            label_smoothing: 0.1,
            seed: 1,
            checkpoint_interval: 0,
            stage: 1,
            lr_scale: 1.0,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} must be in [0, 1)", self.label_smoothing)));
        }
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.max_tokens_per_step == 0 {
            return Err(Error::Config("max_tokens_per_step must be positive".into()));
        }
        if !(self.lr_scale > 0.0) || self.clip_norm < 0.0 {
            return Err(Error::Config("lr_scale must be positive and clip_norm nonnegative".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens: usize,
    pub tokens_per_sec: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_loss: Option<f64>,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// Receives progress while a stage runs.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_interval` steps.
    fn on_checkpoint(&mut self, _step: u64, _model: &Model, _optimizer: &Adam) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct Silent;

impl TrainObserver for Silent {}

/// Collects log records in memory.
#[derive(Default)]
pub struct Recorder {
    pub records: Vec<LogRecord>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, record: &LogRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_loss: f64,
    /// Dev loss of the returned parameters when a dev set was given.
    pub best_dev_loss: Option<f64>,
    pub best_step: u64,
    pub optimizer: Adam,
}

/// Stage 1: the whole model trained with context blocks bypassed.
pub fn train_stage1(model: &mut Model, train: &[EncodedDocument], dev: Option<&[EncodedDocument]>, cfg: &TrainConfig, obs: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    run_stage(model, train, dev, cfg, 1, obs)
}

/// Stage 2: every parameter trained with context from gold previous sentences.
pub fn train_stage2(model: &mut Model, train: &[EncodedDocument], dev: Option<&[EncodedDocument]>, cfg: &TrainConfig, obs: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    run_stage(model, train, dev, cfg, 2, obs)
}

/// Builds the stage-2 model: `target`'s architecture with the checkpoint's
/// transformer weights and freshly initialized context blocks.
pub fn stage2_model(stage1: &Checkpoint, target: HanMode, k: usize, seed: u64) -> Result<Model> {
    let cfg = ModelConfig { han_mode: target, k, ..stage1.config.clone() };
    stage2_model_with(stage1, cfg, seed)
}

pub fn stage2_model_with(stage1: &Checkpoint, cfg: ModelConfig, seed: u64) -> Result<Model> {
    stage1.config.transformer_compatible(&cfg)?;
    let mut model = Model::new(cfg, seed)?;
    let fresh = model.load_matching(&stage1.param_store())?;
    if !fresh.is_empty() {
        log::info!("{} parameters not in the checkpoint were freshly initialized: {}", fresh.len(), fresh.join(", "));
    }
    Ok(model)
}

fn tag_step(e: Error, stage: u8, step: u64) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("stage {stage} step {step}: {m}")),
        e => e,
    }
}

fn run_stage(model: &mut Model, train: &[EncodedDocument], dev: Option<&[EncodedDocument]>, cfg: &TrainConfig, stage: u8, obs: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    cfg.validate()?;
    let use_han = stage == 2;
    let lengths: Vec<Vec<usize>> = train.iter().map(|d| d.pairs.iter().map(|p| p.source.len()).collect()).collect();
    if lengths.iter().all(Vec::is_empty) {
        return Err(Error::Corpus("no training sentences".into()));
    }
    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, u64, ParamStore)> = None;
    let mut final_loss = f64::NAN;
    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: while step < cfg.max_steps {
        let plan = plan_batches(&lengths, cfg.max_tokens_per_step, cfg.seed.wrapping_add(epoch));
        epoch += 1;
        let mut caches: HashMap<usize, ContextCache> = HashMap::new();
        for batch in &plan.steps {
            if step >= cfg.max_steps {
                break 'outer;
            }
            step += 1;
            let started = Instant::now();
            let lr = cfg.lr_scale * lr_schedule(step, model.config.d_model, cfg.warmup_steps)?;
            let (loss, tokens, entries) = {
                let mut ctx = Ctx::train(&model.store, &mut rng);
                let mut parts = Vec::with_capacity(batch.len());
                let mut tokens = 0;
                let mut forwards = Vec::with_capacity(batch.len());
                for &(d, n) in batch {
                    let pair = &train[d].pairs[n];
                    let cache = caches.entry(d).or_insert_with(|| model.cache());
                    let mut c = Context { cache, use_han, sentence: n, traces: None };
                    let (l, f, count) = model.pair_loss(&mut ctx, pair, cfg.label_smoothing, &mut c).map_err(|e| tag_step(e, stage, step))?;
                    parts.push(ctx.graph.scale(l, count as f64));
                    tokens += count;
                    forwards.push(f);
                }
                let mut total = parts[0];
                for &p in &parts[1..] {
                    total = ctx.graph.add(total, p)?;
                }
                let loss = ctx.graph.scale(total, 1.0 / tokens as f64);
                let value = ctx.graph.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("stage {stage} step {step}: loss is {value}")));
                }
                ctx.graph.backward(loss).map_err(|e| tag_step(e, stage, step))?;
                let mut grads = ctx.graph.param_grads();
                if cfg.clip_norm > 0.0 {
                    clip_grad_norm(&mut grads, cfg.clip_norm);
                }
                let entries: Vec<_> = if use_han {
                    batch.iter().zip(&forwards).map(|(&(d, n), f)| (d, model.cache_entry(&ctx, f, &train[d].pairs[n].target_in))).collect()
                } else {
                    Vec::new()
                };
                drop(ctx);
                adam.update(&mut model.store, &grads, lr);
                (value, tokens, entries)
            };
            for (d, (enc, dec)) in entries {
                caches.get_mut(&d).expect("cache exists for a trained document").push(enc, dec);
            }
            for &(d, n) in batch {
                if n + 1 == train[d].pairs.len() {
                    caches.remove(&d);
                }
            }
            final_loss = loss;
            let elapsed = started.elapsed().as_secs_f64().max(1e-9);
            let mut record = LogRecord { stage, step, loss, lr, tokens, tokens_per_sec: tokens as f64 / elapsed, dev_loss: None };
            let at_interval = cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0;
            if let Some(dev) = dev {
                if at_interval || step == cfg.max_steps {
                    let dl = evaluate_loss(model, dev, use_han, cfg.label_smoothing)?;
                    record.dev_loss = Some(dl);
                    if best.as_ref().is_none_or(|b| dl < b.0) {
                        best = Some((dl, step, model.store.clone()));
                    }
                }
            }
            obs.on_step(&record)?;
            if at_interval {
                obs.on_checkpoint(step, model, &adam)?;
            }
        }
    }
    let (best_dev_loss, best_step) = match best {
        Some((dl, s, store)) => {
            model.store = store;
            (Some(dl), s)
        }
        None => (None, step),
    };
    Ok(TrainOutcome { steps: step, final_loss, best_dev_loss, best_step, optimizer: adam })
}

/// Runs `f` over every sentence of every document in order, with a context
/// cache filled from gold targets.
fn for_each_pair<F>(model: &Model, docs: &[EncodedDocument], use_han: bool, mut f: F) -> Result<()>
where
    F: FnMut(&crate::corpus::EncodedPair, &crate::tensor::Tensor),
{
    for doc in docs {
        let mut cache = model.cache();
        for (n, pair) in doc.pairs.iter().enumerate() {
            let mut c = Context { cache: &cache, use_han, sentence: n, traces: None };
            let (logits, (enc, dec)) = model.eval_pair(pair, &mut c)?;
            f(pair, &logits);
            cache.push(enc, dec);
        }
    }
    Ok(())
}

/// Token-weighted smoothed cross-entropy over `docs` (dropout off).
pub fn evaluate_loss(model: &Model, docs: &[EncodedDocument], use_han: bool, smoothing: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for doc in docs {
        let mut cache = model.cache();
        for (n, pair) in doc.pairs.iter().enumerate() {
            let mut ctx = Ctx::eval(&model.store);
            let mut c = Context { cache: &cache, use_han, sentence: n, traces: None };
            let (l, f, k) = model.pair_loss(&mut ctx, pair, smoothing, &mut c)?;
            total += ctx.graph.value(l).data()[0] * k as f64;
            count += k;
            let (enc, dec) = model.cache_entry(&ctx, &f, &pair.target_in);
            cache.push(enc, dec);
        }
    }
    if count == 0 {
        return Err(Error::Corpus("no tokens to evaluate".into()));
    }
    Ok(total / count as f64)
}

/// Fraction of target tokens predicted correctly under teacher forcing.
pub fn teacher_forced_accuracy(model: &Model, docs: &[EncodedDocument], use_han: bool) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for_each_pair(model, docs, use_han, |pair, logits| {
        for (p, &t) in argmax_rows(logits).iter().zip(&pair.target_out) {
            if t != PAD {
                total += 1;
                hits += usize::from(*p == t);
            }
        }
    })?;
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EncodedPair;
    use crate::vocab::{BOS, EOS};

    fn pair(ids: &[usize]) -> EncodedPair {
        let mut source = ids.to_vec();
        source.push(EOS);
        let mut target_in = vec![BOS];
        target_in.extend(ids);
        let mut target_out = ids.to_vec();
        target_out.push(EOS);
        EncodedPair { source, target_in, target_out }
    }

    fn docs() -> Vec<EncodedDocument> {
        vec![
            EncodedDocument { id: "0".into(), pairs: vec![pair(&[4, 5]), pair(&[6, 7, 4])] },
            EncodedDocument { id: "1".into(), pairs: vec![pair(&[7]), pair(&[5, 5]), pair(&[6])] },
        ]
    }

    fn cfg(mode: HanMode) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 16,
            dropout: 0.1,
            vocab_src: 8,
            vocab_tgt: 8,
            max_len: 10,
            k: 2,
            han_mode: mode,
            han_heads: 2,
            han_residual: false,
        }
    }

    fn tc(steps: u64) -> TrainConfig {
        TrainConfig { warmup_steps: 10, max_steps: steps, max_tokens_per_step: 8, lr_scale: 2.0, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { warmup_steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { stage: 3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn initial_loss_near_log_vocab() {
        let m = Model::new(cfg(HanMode::None), 0).unwrap();
        let l = evaluate_loss(&m, &docs(), false, 0.0).unwrap();
        let ln_v = (8f64).ln();
        assert!((l - ln_v).abs() < 0.1 * ln_v, "{l} vs {ln_v}");
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let run = || {
            let mut m = Model::new(cfg(HanMode::None), 0).unwrap();
            let mut rec = Recorder::default();
            let out = train_stage1(&mut m, &docs(), None, &tc(60), &mut rec).unwrap();
            (out.final_loss, rec.records, m.store.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>())
        };
        let (a, ra, pa) = run();
        let (b, _, pb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(pa, pb);
        assert!(ra.last().unwrap().loss < ra[0].loss);
        assert_eq!(ra.len(), 60);
    }

    #[test]
    fn stage2_updates_every_parameter() {
        let mut m1 = Model::new(cfg(HanMode::None), 0).unwrap();
        train_stage1(&mut m1, &docs(), None, &tc(5), &mut Silent).unwrap();
        let v = crate::vocab::Vocabulary::from_tokens(["a", "b", "c", "d"]).unwrap();
        let ck = Checkpoint::from_model(&m1, 1, 5, &v, &v, None);
        let mut m2 = stage2_model(&ck, HanMode::Joint, 2, 9).unwrap();
        let before = m2.store.clone();
        train_stage2(&mut m2, &docs(), None, &tc(20), &mut Silent).unwrap();
        for (id, p) in m2.store.iter() {
            assert_ne!(&p.value, before.value(id), "{} never updated", p.name);
        }
    }

    #[test]
    fn stage2_rejects_incompatible_checkpoint() {
        let m1 = Model::new(cfg(HanMode::None), 0).unwrap();
        let v = crate::vocab::Vocabulary::from_tokens(["a"]).unwrap();
        let ck = Checkpoint::from_model(&m1, 1, 0, &v, &v, None);
        let bad = ModelConfig { d_model: 16, ..cfg(HanMode::Joint) };
        assert!(stage2_model_with(&ck, bad, 0).is_err());
    }

    #[test]
    fn dev_selection_keeps_best() {
        let mut m = Model::new(cfg(HanMode::None), 0).unwrap();
        let d = docs();
        let out = train_stage1(&mut m, &d, Some(&d), &TrainConfig { checkpoint_interval: 10, ..tc(40) }, &mut Silent).unwrap();
        let best = out.best_dev_loss.unwrap();
        assert_eq!(evaluate_loss(&m, &d, false, 0.1).unwrap(), best);
    }
}
