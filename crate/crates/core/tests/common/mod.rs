#![allow(dead_code)]

use hanmt::corpus::{Document, EncodedPair};
use hanmt::grad_check::{rel_error, GradCheck, FD_STEP};
use hanmt::model::{Context, Model};
use hanmt::nn::Ctx;
use hanmt::synthetic::{gen_synthetic, SyntheticConfig};
use hanmt::{ContextCache, HanMode, ModelConfig, Result, Var, Vocabulary};

pub fn tiny_config(mode: HanMode) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers_enc: 1,
        n_layers_dec: 1,
        d_ff: 16,
        dropout: 0.0,
        vocab_src: 9,
        vocab_tgt: 9,
        max_len: 12,
        k: 2,
        han_mode: mode,
        han_heads: 2,
        han_residual: false,
    }
}

pub fn pair(src: &[usize], tgt: &[usize]) -> EncodedPair {
    let mut source = src.to_vec();
    source.push(hanmt::vocab::EOS);
    let mut target_in = vec![hanmt::vocab::BOS];
    target_in.extend_from_slice(tgt);
    let mut target_out = tgt.to_vec();
    target_out.push(hanmt::vocab::EOS);
    EncodedPair { source, target_in, target_out }
}

/// Reverse-mode parameter gradients of `loss` against central differences,
/// perturbing every parameter entry in place.
pub fn model_grad_check<F>(model: &mut Model, loss: F) -> Result<GradCheck>
where
    F: Fn(&Model, &mut Ctx) -> Result<Var>,
{
    let analytic = {
        let mut ctx = Ctx::eval(&model.store);
        let out = loss(model, &mut ctx)?;
        ctx.graph.backward(out)?;
        ctx.graph.param_grads()
    };
    let value = |m: &Model| -> Result<f64> {
        let mut ctx = Ctx::eval(&m.store);
        let out = loss(m, &mut ctx)?;
        Ok(ctx.graph.value(out).data()[0])
    };
    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let grad = analytic.iter().find(|(g, _)| *g == id).map(|(_, t)| t.data().to_vec());
        for k in 0..model.store.value(id).numel() {
            let orig = model.store.value(id).data()[k];
            model.store.value_mut(id).data_mut()[k] = orig + FD_STEP;
            let plus = value(model)?;
            model.store.value_mut(id).data_mut()[k] = orig - FD_STEP;
            let minus = value(model)?;
            model.store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.as_ref().map_or(0.0, |g| g[k]);
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Cache after evaluating `pairs` in order with the model's current weights.
pub fn build_cache(model: &Model, pairs: &[EncodedPair]) -> Result<ContextCache> {
    let mut cache = model.cache();
    for (n, p) in pairs.iter().enumerate() {
        let (_, entry) = model.eval_pair(p, &mut Context::on(&cache, n))?;
        cache.push(entry.0, entry.1);
    }
    Ok(cache)
}

pub fn sentence_loss(model: &Model, ctx: &mut Ctx, cache: &ContextCache, sentence: usize, p: &EncodedPair, smoothing: f64) -> Result<Var> {
    let mut c = Context::on(cache, sentence);
    let (loss, _, _) = model.pair_loss(ctx, p, smoothing, &mut c)?;
    Ok(loss)
}

pub fn small_synthetic(seed: u64, n_docs: usize) -> Vec<Document> {
    gen_synthetic(&SyntheticConfig { seed, n_docs, doc_len: 3, max_distance: 2, ..Default::default() }).unwrap().0
}

pub fn vocab_of(words: &[&str]) -> Vocabulary {
    Vocabulary::from_tokens(words.iter().copied()).unwrap()
}
