//! Beam search and document-sequential translation.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::han::AttentionTrace;
use crate::model::{Context, Model};
use crate::nn::Ctx;
use crate::vocab::{BOS, EOS};

pub const DEFAULT_LENGTH_PENALTY: f64 = 0.6;
pub const DEFAULT_MAX_LEN_FACTOR: f64 = 1.5;
pub const MIN_TARGET_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted target ids, including a final EOS once finished.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn empty() -> Self {
        Self { tokens: Vec::new(), score: 0.0, finished: false }
    }

    /// `score / len^penalty`; the empty hypothesis keeps its raw score.
    pub fn normalized(&self, penalty: f64) -> f64 {
        normalize(self.score, self.tokens.len(), penalty)
    }

    /// Tokens without a trailing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn normalize(score: f64, len: usize, penalty: f64) -> f64 {
    if len == 0 || penalty == 0.0 {
        score
    } else {
        score / (len as f64).powf(penalty)
    }
}

/// Higher normalized score first, then lexicographically smaller tokens.
fn rank(a: &Hypothesis, b: &Hypothesis, penalty: f64) -> Ordering {
    b.normalized(penalty)
        .partial_cmp(&a.normalized(penalty))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Expands every unfinished hypothesis by every token and keeps the best
/// `beam_size` (finished hypotheses compete for slots unchanged).
/// `logits[i]` belongs to the i-th unfinished hypothesis in order.
/// Hypotheses reaching `max_len` tokens are marked finished.
pub fn beam_step(hyps: &[Hypothesis], logits: &[Vec<f64>], beam_size: usize, penalty: f64, max_len: usize) -> Result<Vec<Hypothesis>> {
    let active = hyps.iter().filter(|h| !h.finished).count();
    if active != logits.len() {
        return Err(Error::invalid("beam_step", format!("{} logit rows for {active} open hypotheses", logits.len())));
    }
    let mut rows = logits.iter();
    let mut cands = Vec::new();
    for h in hyps {
        if h.finished {
            cands.push(h.clone());
            continue;
        }
        let lp = log_softmax(rows.next().unwrap());
        for (t, &l) in lp.iter().enumerate() {
            let mut tokens = h.tokens.clone();
            tokens.push(t);
            let finished = t == EOS || tokens.len() >= max_len;
            cands.push(Hypothesis { tokens, score: h.score + l, finished });
        }
    }
    cands.sort_by(|a, b| rank(a, b, penalty));
    cands.truncate(beam_size.max(1));
    Ok(cands)
}

/// Beam search with `step(prefix)` returning next-token logits.
pub fn beam_search<F>(mut step: F, beam_size: usize, penalty: f64, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if beam_size == 0 {
        return Err(Error::invalid("beam_search", "beam size must be at least 1"));
    }
    let mut beam = vec![Hypothesis::empty()];
    for _ in 0..max_len.max(1) {
        let logits = beam.iter().filter(|h| !h.finished).map(|h| step(&h.tokens)).collect::<Result<Vec<_>>>()?;
        if logits.is_empty() {
            break;
        }
        beam = beam_step(&beam, &logits, beam_size, penalty, max_len.max(1))?;
        let best_done = beam.iter().filter(|h| h.finished).map(|h| h.normalized(penalty)).fold(f64::NEG_INFINITY, f64::max);
        // Log-probabilities are nonpositive, so an open hypothesis can at best
        // keep its raw score and stretch to max_len.
        let best_open = beam
            .iter()
            .filter(|h| !h.finished)
            .map(|h| normalize(h.score, max_len, penalty))
            .fold(f64::NEG_INFINITY, f64::max);
        if best_open == f64::NEG_INFINITY || best_done >= best_open {
            break;
        }
    }
    beam.into_iter()
        .filter(|h| h.finished)
        .min_by(|a, b| rank(a, b, penalty))
        .ok_or_else(|| Error::invalid("beam_search", "no hypothesis finished"))
}

/// Step-by-step argmax decoding; ties go to the lowest token id.
pub fn greedy<F>(mut step: F, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut h = Hypothesis::empty();
    while !h.finished {
        let lp = log_softmax(&step(&h.tokens)?);
        let mut best = 0;
        for (t, &l) in lp.iter().enumerate() {
            if l > lp[best] {
                best = t;
            }
        }
        h.tokens.push(best);
        h.score += lp[best];
        h.finished = best == EOS || h.tokens.len() >= max_len.max(1);
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub beam_size: usize,
    pub length_penalty: f64,
    pub max_len_factor: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { beam_size: 4, length_penalty: DEFAULT_LENGTH_PENALTY, max_len_factor: DEFAULT_MAX_LEN_FACTOR }
    }
}

/// Target length cap for a source of `src_len` words.
pub fn max_target_len(src_len: usize, factor: f64) -> usize {
    ((src_len as f64 * factor).floor() as usize).max(MIN_TARGET_LEN)
}

/// Translates the sentences of one document in order. `sources` are source
/// ids ending in EOS; outputs exclude EOS. After each sentence the context
/// cache receives the states of a forced pass over the chosen translation,
/// and that pass's context attention is appended to `traces`.
pub fn translate_document(model: &Model, sources: &[Vec<usize>], opts: &DecodeOptions, mut traces: Option<&mut Vec<AttentionTrace>>) -> Result<Vec<Vec<usize>>> {
    let mut cache = model.cache();
    let mut out = Vec::with_capacity(sources.len());
    for (n, src) in sources.iter().enumerate() {
        let words = src.iter().filter(|&&t| t != EOS).count();
        // BOS plus the prefix must fit the decoder's positions.
        let cap = max_target_len(words, opts.max_len_factor).min(model.config.max_len.saturating_sub(1)).max(1);

        let mut ectx = Ctx::eval(&model.store);
        let mut c = Context::on(&cache, n);
        let (enc, memory) = model.encode(&mut ectx, src, &mut c)?;
        let memory = ectx.graph.value(memory).clone();
        let mask = enc.mask.clone();
        drop(ectx);

        let step = |prefix: &[usize]| -> Result<Vec<f64>> {
            let mut ctx = Ctx::eval(&model.store);
            let mem = ctx.graph.constant(memory.clone());
            let mut target_in = Vec::with_capacity(prefix.len() + 1);
            target_in.push(BOS);
            target_in.extend_from_slice(prefix);
            let mut c = Context::on(&cache, n);
            let (_, _, logits) = model.decode(&mut ctx, &target_in, mem, &mask, &mut c)?;
            let l = ctx.graph.value(logits);
            Ok(l.row(l.rows() - 1).to_vec())
        };
        let best = if opts.beam_size == 1 {
            greedy(step, cap)?
        } else {
            beam_search(step, opts.beam_size, opts.length_penalty, cap)?
        };
        let tokens = best.output().to_vec();

        let mut target_in = vec![BOS];
        target_in.extend(&tokens);
        let mut ctx = Ctx::eval(&model.store);
        let mut c = Context { cache: &cache, use_han: true, sentence: n, traces: traces.as_deref_mut() };
        let f = model.forward(&mut ctx, src, &target_in, &mut c)?;
        let (e, d) = model.cache_entry(&ctx, &f, &target_in);
        drop(ctx);
        cache.push(e, d);
        out.push(tokens);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Logits depend on the whole prefix through a hash-seeded RNG.
    fn table_model(seed: u64, vocab: usize) -> impl FnMut(&[usize]) -> Result<Vec<f64>> {
        move |prefix: &[usize]| {
            let mut h = seed;
            for &t in prefix {
                h = h.wrapping_mul(31).wrapping_add(t as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            Ok((0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect())
        }
    }

    fn exhaustive(mut f: impl FnMut(&[usize]) -> Result<Vec<f64>>, vocab: usize, max_len: usize, penalty: f64) -> Hypothesis {
        let mut best: Option<Hypothesis> = None;
        let mut stack = vec![Hypothesis::empty()];
        while let Some(h) = stack.pop() {
            if h.finished {
                if best.as_ref().is_none_or(|b| rank(&h, b, penalty) == Ordering::Less) {
                    best = Some(h);
                }
                continue;
            }
            let lp = log_softmax(&f(&h.tokens).unwrap());
            for t in 0..vocab {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                let finished = t == EOS || tokens.len() >= max_len;
                stack.push(Hypothesis { tokens, score: h.score + lp[t], finished });
            }
        }
        best.unwrap()
    }

    #[test]
    fn saturated_beam_is_exact() {
        for seed in 0..20 {
            let (v, l) = (5, 3);
            let b = beam_search(table_model(seed, v), v.pow(l as u32), 0.6, l).unwrap();
            assert_eq!(b, exhaustive(table_model(seed, v), v, l, 0.6), "seed {seed}");
        }
    }

    #[test]
    fn beam_two_matches_enumeration_on_peaked_table() {
        // id 3 is EOS; id 0 is effectively unreachable
        let f = |p: &[usize]| -> Result<Vec<f64>> {
            Ok(match p.len() {
                0 => vec![-9.0, 2.0, 1.9, -1.0],
                1 if p[0] == 1 => vec![-9.0, -1.0, -1.0, 0.5],
                1 => vec![-9.0, 3.0, -2.0, -2.0],
                _ => vec![-9.0, -2.0, -2.0, 3.0],
            })
        };
        let b = beam_search(f, 2, 0.6, 3).unwrap();
        assert_eq!(b, exhaustive(f, 4, 3, 0.6));
    }

    #[test]
    fn zero_penalty_is_raw_sum() {
        let h = Hypothesis { tokens: vec![4, 5, EOS], score: -1.5, finished: true };
        assert_eq!(h.normalized(0.0), -1.5);
        assert!((h.normalized(0.6) - (-1.5 / 3f64.powf(0.6))).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_token_id() {
        let f = |p: &[usize]| -> Result<Vec<f64>> { Ok(if p.is_empty() { vec![0.0, 1.0, 1.0, 0.0] } else { vec![0.0, 0.0, 0.0, 9.0] }) };
        let a = beam_search(f, 2, 0.6, 3).unwrap();
        assert_eq!(a.tokens, vec![1, EOS]);
        assert_eq!(greedy(f, 3).unwrap().tokens, vec![1, EOS]);
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..30 {
            let g = greedy(table_model(seed, 6), 6).unwrap();
            let b = beam_search(table_model(seed, 6), 1, 0.6, 6).unwrap();
            assert_eq!(g.tokens, b.tokens, "seed {seed}");
        }
    }

    #[test]
    fn scores_never_increase() {
        let h = beam_search(table_model(3, 5), 4, 0.6, 4).unwrap();
        let mut f = table_model(3, 5);
        let mut s = 0.0;
        for i in 0..h.tokens.len() {
            let next = s + log_softmax(&f(&h.tokens[..i]).unwrap())[h.tokens[i]];
            assert!(next <= s);
            s = next;
        }
        assert!((s - h.score).abs() < 1e-12);
    }

    #[test]
    fn target_length_cap() {
        assert_eq!(max_target_len(2, 1.5), 5);
        assert_eq!(max_target_len(10, 1.5), 15);
        assert_eq!(max_target_len(7, 1.5), 10);
    }
}
