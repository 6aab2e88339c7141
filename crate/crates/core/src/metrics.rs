//! Translation quality and discourse metrics.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{MonoDocument, Sentence};
use crate::error::{Error, Result};

/// Corpus-level BLEU with its components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bleu {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngrams(s: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Single-reference corpus BLEU over aligned sentence lists.
pub fn bleu(candidates: &[Sentence], references: &[Sentence], max_n: usize) -> Result<Bleu> {
    if candidates.len() != references.len() {
        return Err(Error::invalid("bleu", format!("{} candidate vs {} reference sentences", candidates.len(), references.len())));
    }
    if max_n == 0 {
        return Err(Error::invalid("bleu", "max_n must be at least 1"));
    }
    let reference_len: usize = references.iter().map(Vec::len).sum();
    if reference_len == 0 {
        return Err(Error::invalid("bleu", "empty reference"));
    }
    let candidate_len: usize = candidates.iter().map(Vec::len).sum();
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut ref_total = vec![0usize; max_n];
    for (c, r) in candidates.iter().zip(references) {
        for n in 1..=max_n {
            let rc = ngrams(r, n);
            ref_total[n - 1] += r.len().saturating_sub(n - 1);
            for (g, k) in ngrams(c, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    // An order with no n-grams on either side is vacuously matched.
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| match (total[i], ref_total[i]) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (t, _) => matched[i] as f64 / t as f64,
        })
        .collect();
    let brevity_penalty = if candidate_len == 0 {
        0.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp().min(1.0)
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Ok(Bleu { score, precisions, brevity_penalty, candidate_len, reference_len })
}

/// Hits over occurrences; `value` is `None` when there was nothing to count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratio {
    pub hits: usize,
    pub total: usize,
}

impl Ratio {
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }

    fn add(&mut self, o: Ratio) {
        self.hits += o.hits;
        self.total += o.total;
    }
}

/// Word-list accuracy by target-side matching within a position window: each
/// reference occurrence of a listed word is a hit when the candidate has the
/// same word, not yet used, within `window` positions (nearest first).
pub fn pronoun_noun_accuracy(candidates: &[Sentence], references: &[Sentence], words: &HashSet<String>, window: usize) -> Result<Ratio> {
    if candidates.len() != references.len() {
        return Err(Error::invalid("pronoun_noun_accuracy", "candidate and reference sentence counts differ"));
    }
    let mut r = Ratio { hits: 0, total: 0 };
    for (c, rf) in candidates.iter().zip(references) {
        let c: Vec<String> = c.iter().map(|w| w.to_lowercase()).collect();
        let mut used = vec![false; c.len()];
        for (i, w) in rf.iter().enumerate() {
            let w = w.to_lowercase();
            if !words.contains(&w) {
                continue;
            }
            r.total += 1;
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(c.len().saturating_sub(1));
            let best = (lo..=hi)
                .filter(|&j| j < c.len() && !used[j] && c[j] == w)
                .min_by_key(|&j| (j.abs_diff(i), j));
            if let Some(j) = best {
                used[j] = true;
                r.hits += 1;
            }
        }
    }
    Ok(r)
}

/// Symmetric word-similarity pairs, one `word other` pair per line.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    similar: HashMap<String, HashSet<String>>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 2 {
                return Err(Error::Corpus(format!("lexicon line {}: expected two words", i + 1)));
            }
            let (a, b) = (f[0].to_lowercase(), f[1].to_lowercase());
            lex.similar.entry(a.clone()).or_default().insert(b.clone());
            lex.similar.entry(b).or_default().insert(a);
        }
        Ok(lex)
    }

    pub fn similar(&self, w: &str) -> impl Iterator<Item = &String> {
        self.similar.get(w).into_iter().flatten()
    }
}

/// Share of content-word tokens whose lowercase form, or a lexicon-similar
/// form, already occurred earlier in the document.
pub fn lexical_cohesion(sentences: &[Sentence], stopwords: &HashSet<String>, lexicon: Option<&Lexicon>) -> Ratio {
    let mut seen: HashSet<String> = HashSet::new();
    let mut r = Ratio { hits: 0, total: 0 };
    for w in sentences.iter().flatten() {
        let w = w.to_lowercase();
        if stopwords.contains(&w) {
            continue;
        }
        r.total += 1;
        let cohesive = seen.contains(&w) || lexicon.is_some_and(|l| l.similar(&w).any(|s| seen.contains(s)));
        if cohesive {
            r.hits += 1;
        }
        seen.insert(w);
    }
    r
}

/// Word vectors read from `word v1 v2 ...` lines. A leading `count dim`
/// header line is accepted.
#[derive(Debug, Clone, Default)]
pub struct Embeddings {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl Embeddings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Self::default();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            if i == 0 && f.len() == 2 && f.iter().all(|x| x.parse::<usize>().is_ok()) {
                continue;
            }
            let v = f[1..]
                .iter()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Corpus(format!("embedding line {}: bad number", i + 1)))?;
            if v.is_empty() || (e.dim != 0 && v.len() != e.dim) {
                return Err(Error::Corpus(format!("embedding line {}: expected {} values, got {}", i + 1, e.dim, v.len())));
            }
            e.dim = v.len();
            e.vectors.insert(f[0].to_string(), v);
        }
        if e.vectors.is_empty() {
            return Err(Error::Corpus("embedding file has no vectors".into()));
        }
        Ok(e)
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, Vec<f64>)>>(pairs: I) -> Result<Self> {
        let mut e = Self::default();
        for (w, v) in pairs {
            if e.dim != 0 && v.len() != e.dim {
                return Err(Error::Corpus(format!("vector for {w} has dimension {}", v.len())));
            }
            e.dim = v.len();
            e.vectors.insert(w, v);
        }
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean of the in-vocabulary word vectors; `None` if no word is known.
    pub fn sentence_vector(&self, s: &[String]) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0;
        for v in s.iter().filter_map(|w| self.vectors.get(w)) {
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            n += 1;
        }
        (n > 0).then(|| acc.into_iter().map(|x| x / n as f64).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coherence {
    /// Sum of consecutive-pair cosines.
    pub sum: f64,
    pub pairs: usize,
    /// Pairs skipped because a sentence vector was missing or zero.
    pub skipped: usize,
}

impl Coherence {
    pub fn value(&self) -> Option<f64> {
        (self.pairs > 0).then(|| self.sum / self.pairs as f64)
    }

    fn add(&mut self, o: Coherence) {
        self.sum += o.sum;
        self.pairs += o.pairs;
        self.skipped += o.skipped;
    }
}

/// Mean cosine similarity between consecutive sentence vectors.
pub fn coherence(sentences: &[Sentence], emb: &Embeddings) -> Coherence {
    let vecs: Vec<Option<Vec<f64>>> = sentences.iter().map(|s| emb.sentence_vector(s)).collect();
    let mut c = Coherence { sum: 0.0, pairs: 0, skipped: 0 };
    for w in vecs.windows(2) {
        match (&w[0], &w[1]) {
            (Some(a), Some(b)) => {
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    c.skipped += 1;
                } else {
                    c.sum += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                    c.pairs += 1;
                }
            }
            _ => c.skipped += 1,
        }
    }
    c
}

/// Optional inputs for the discourse metrics.
#[derive(Debug, Clone, Default)]
pub struct EvalResources {
    pub pronouns: Option<HashSet<String>>,
    pub nouns: Option<HashSet<String>>,
    pub window: usize,
    pub stopwords: Option<HashSet<String>>,
    pub lexicon: Option<Lexicon>,
    pub embeddings: Option<Embeddings>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocReport {
    pub id: String,
    pub bleu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohesion: Option<Ratio>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coherence: Option<Coherence>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub bleu: Bleu,
    pub pronoun_acc: Option<Ratio>,
    pub noun_acc: Option<Ratio>,
    pub cohesion: Option<Ratio>,
    pub coherence: Option<Coherence>,
    pub documents: Vec<DocReport>,
}

pub fn evaluate(candidates: &[MonoDocument], references: &[MonoDocument], res: &EvalResources) -> Result<EvalReport> {
    if candidates.len() != references.len() {
        return Err(Error::Corpus(format!("{} candidate vs {} reference documents", candidates.len(), references.len())));
    }
    for (c, r) in candidates.iter().zip(references) {
        if c.sentences.len() != r.sentences.len() {
            return Err(Error::Corpus(format!("document {}: {} candidate vs {} reference sentences", r.id, c.sentences.len(), r.sentences.len())));
        }
    }
    let flat = |d: &[MonoDocument]| -> Vec<Sentence> { d.iter().flat_map(|x| x.sentences.iter().cloned()).collect() };
    let (cf, rf) = (flat(candidates), flat(references));
    let bleu_total = bleu(&cf, &rf, 4)?;
    let pronoun_acc = res.pronouns.as_ref().map(|w| pronoun_noun_accuracy(&cf, &rf, w, res.window)).transpose()?;
    let noun_acc = res.nouns.as_ref().map(|w| pronoun_noun_accuracy(&cf, &rf, w, res.window)).transpose()?;
    let mut documents = Vec::new();
    let mut cohesion = res.stopwords.as_ref().map(|_| Ratio { hits: 0, total: 0 });
    let mut coh = res.embeddings.as_ref().map(|_| Coherence { sum: 0.0, pairs: 0, skipped: 0 });
    for (c, r) in candidates.iter().zip(references) {
        let b = if r.sentences.iter().all(Vec::is_empty) { 0.0 } else { bleu(&c.sentences, &r.sentences, 4)?.score };
        let dc = res.stopwords.as_ref().map(|s| lexical_cohesion(&c.sentences, s, res.lexicon.as_ref()));
        let dk = res.embeddings.as_ref().map(|e| coherence(&c.sentences, e));
        if let (Some(t), Some(d)) = (cohesion.as_mut(), dc) {
            t.add(d);
        }
        if let (Some(t), Some(d)) = (coh.as_mut(), dk) {
            t.add(d);
        }
        documents.push(DocReport { id: r.id.clone(), bleu: b, cohesion: dc, coherence: dk });
    }
    Ok(EvalReport { bleu: bleu_total, pronoun_acc, noun_acc, cohesion, coherence: coh, documents })
}

fn ratio_text(r: &Option<Ratio>) -> String {
    match r {
        None => "n/a".into(),
        Some(r) => match r.value() {
            Some(v) => format!("{v:.4} ({}/{})", r.hits, r.total),
            None => "undefined (0 occurrences)".into(),
        },
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p: Vec<String> = self.bleu.precisions.iter().map(|p| format!("{:.2}", 100.0 * p)).collect();
        let _ = writeln!(
            s,
            "BLEU = {:.2} ({}) BP={:.4} hyp_len={} ref_len={}",
            self.bleu.score,
            p.join("/"),
            self.bleu.brevity_penalty,
            self.bleu.candidate_len,
            self.bleu.reference_len
        );
        let _ = writeln!(s, "pronoun accuracy (APT-simplified): {}", ratio_text(&self.pronoun_acc));
        let _ = writeln!(s, "noun accuracy (APT-simplified): {}", ratio_text(&self.noun_acc));
        let _ = writeln!(s, "lexical cohesion: {}", ratio_text(&self.cohesion));
        let coh = match &self.coherence {
            None => "n/a".to_string(),
            Some(c) => match c.value() {
                Some(v) => format!("{v:.4} ({} pairs, {} skipped)", c.pairs, c.skipped),
                None => format!("undefined ({} skipped)", c.skipped),
            },
        };
        let _ = writeln!(s, "coherence: {coh}");
        for d in &self.documents {
            let _ = writeln!(s, "  doc {}: BLEU {:.2}", d.id, d.bleu);
        }
        s
    }

    /// One JSON object per line: a summary record then one per document.
    pub fn to_jsonl(&self) -> String {
        let summary = serde_json::json!({
            "record": "summary",
            "bleu": self.bleu,
            "pronoun_acc": self.pronoun_acc.map(|r| serde_json::json!({"hits": r.hits, "total": r.total, "value": r.value()})),
            "noun_acc": self.noun_acc.map(|r| serde_json::json!({"hits": r.hits, "total": r.total, "value": r.value()})),
            "cohesion": self.cohesion.map(|r| serde_json::json!({"hits": r.hits, "total": r.total, "value": r.value()})),
            "coherence": self.coherence.map(|c| serde_json::json!({"pairs": c.pairs, "skipped": c.skipped, "value": c.value()})),
        });
        let mut s = summary.to_string();
        s.push('\n');
        for d in &self.documents {
            let mut v = serde_json::to_value(d).expect("report serializes");
            v["record"] = "document".into();
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }
}

/// Reads a word list: one word per line, `#` comments, lowercased.
pub fn parse_word_list(text: &str) -> HashSet<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_lowercase).collect()
}
