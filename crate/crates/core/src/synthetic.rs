//! Generator for a controlled inter-sentence dependency task.
//!
//! Filler words `w{i}` translate to themselves. Each document holds one
//! antecedent `A{c}` (translated `a{c}`) and, in a later sentence at most
//! `max_distance` sentences on, one ambiguous token `AMB` whose translation is
//! `r{c}`. Without the antecedent the ambiguous token carries
//! `log2(m_alternatives)` bits of irreducible uncertainty.

use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;
use crate::error::{Error, Result};

pub const AMBIGUOUS: &str = "AMB";
pub const GROUND_TRUTH_HEADER: &str = "# hanmt ground-truth v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub doc_len: usize,
    pub m_alternatives: usize,
    pub filler_vocab: usize,
    /// Largest sentence distance between antecedent and ambiguous token.
    pub max_distance: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_docs: 100,
            doc_len: 4,
            m_alternatives: 4,
            filler_vocab: 20,
            max_distance: 3,
            min_sentence_len: 3,
            max_sentence_len: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub doc: String,
    pub sentence: usize,
    pub position: usize,
    pub token: String,
}

pub fn antecedent(c: usize) -> String {
    format!("A{c}")
}

pub fn antecedent_translation(c: usize) -> String {
    format!("a{c}")
}

pub fn resolution(c: usize) -> String {
    format!("r{c}")
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<Document>, Vec<GroundTruth>)> {
    if cfg.doc_len < 2 {
        return Err(Error::Config(format!("doc_len must be at least 2, got {}", cfg.doc_len)));
    }
    if cfg.max_distance == 0 {
        return Err(Error::Config("max_distance 0 leaves no room for an antecedent".into()));
    }
    if cfg.m_alternatives == 0 || cfg.filler_vocab == 0 {
        return Err(Error::Config("m_alternatives and filler_vocab must be positive".into()));
    }
    if cfg.min_sentence_len < 2 || cfg.min_sentence_len > cfg.max_sentence_len {
        return Err(Error::Config(format!(
            "sentence length range {}..={} is invalid (minimum 2)",
            cfg.min_sentence_len, cfg.max_sentence_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut docs = Vec::with_capacity(cfg.n_docs);
    let mut truth = Vec::with_capacity(cfg.n_docs);
    for d in 0..cfg.n_docs {
        let c = rng.gen_range(0..cfg.m_alternatives);
        let amb_sentence = rng.gen_range(1..cfg.doc_len);
        let lo = amb_sentence.saturating_sub(cfg.max_distance);
        let ante_sentence = rng.gen_range(lo..amb_sentence);
        let mut pairs = Vec::with_capacity(cfg.doc_len);
        for s in 0..cfg.doc_len {
            let len = rng.gen_range(cfg.min_sentence_len..=cfg.max_sentence_len);
            let mut src: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..cfg.filler_vocab))).collect();
            let mut tgt = src.clone();
            if s == ante_sentence {
                let p = rng.gen_range(0..len);
                src[p] = antecedent(c);
                tgt[p] = antecedent_translation(c);
            }
            if s == amb_sentence {
                let p = rng.gen_range(0..len);
                src[p] = AMBIGUOUS.to_string();
                tgt[p] = resolution(c);
                truth.push(GroundTruth { doc: d.to_string(), sentence: s, position: p, token: resolution(c) });
            }
            pairs.push((src, tgt));
        }
        docs.push(Document { id: d.to_string(), pairs });
    }
    Ok((docs, truth))
}

pub fn write_ground_truth<W: Write>(out: &mut W, rows: &[GroundTruth]) -> std::io::Result<()> {
    writeln!(out, "{GROUND_TRUTH_HEADER}")?;
    writeln!(out, "doc\tsentence\tposition\ttoken")?;
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{}", r.doc, r.sentence, r.position, r.token)?;
    }
    Ok(())
}

pub fn read_ground_truth<R: BufRead>(input: R) -> Result<Vec<GroundTruth>> {
    let mut rows = Vec::new();
    let mut lines = input.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == GROUND_TRUTH_HEADER => {}
        _ => return Err(Error::Corpus(format!("ground-truth table must start with '{GROUND_TRUTH_HEADER}'"))),
    }
    for (i, line) in lines {
        let line = line.map_err(|e| Error::Corpus(e.to_string()))?;
        if line.is_empty() || line.starts_with("doc\t") {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Corpus(format!("ground-truth line {}: expected 4 tab-separated fields", i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        rows.push(GroundTruth {
            doc: f[0].to_string(),
            sentence: f[1].parse().map_err(|_| bad())?,
            position: f[2].parse().map_err(|_| bad())?,
            token: f[3].to_string(),
        });
    }
    Ok(rows)
}

/// Fraction of ground-truth rows whose expected token appears at the recorded
/// position of the candidate. `candidates` is looked up by document id.
pub fn ambiguous_accuracy(rows: &[GroundTruth], candidate: impl Fn(&str, usize) -> Option<Vec<String>>) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hits = rows
        .iter()
        .filter(|r| {
            candidate(&r.doc, r.sentence).is_some_and(|s| s.get(r.position).is_some_and(|t| *t == r.token))
        })
        .count();
    hits as f64 / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    fn cfg(seed: u64, m: usize) -> SyntheticConfig {
        SyntheticConfig { seed, n_docs: 400, m_alternatives: m, ..Default::default() }
    }

    #[test]
    fn deterministic_for_seed() {
        assert_eq!(gen_synthetic(&cfg(7, 4)).unwrap(), gen_synthetic(&cfg(7, 4)).unwrap());
        assert_ne!(gen_synthetic(&cfg(7, 4)).unwrap().0, gen_synthetic(&cfg(8, 4)).unwrap().0);
    }

    #[test]
    fn rejects_unplaceable() {
        assert!(gen_synthetic(&SyntheticConfig { doc_len: 1, ..Default::default() }).is_err());
        assert!(gen_synthetic(&SyntheticConfig { max_distance: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn structure_holds() {
        let c = cfg(3, 4);
        let (docs, truth) = gen_synthetic(&c).unwrap();
        assert_eq!(truth.len(), docs.len());
        for (doc, row) in docs.iter().zip(&truth) {
            assert_eq!(doc.pairs.len(), c.doc_len);
            let (src, tgt) = &doc.pairs[row.sentence];
            assert_eq!(src[row.position], AMBIGUOUS);
            assert_eq!(tgt[row.position], row.token);
            assert!(!src.iter().any(|t| t.starts_with('A') && t != AMBIGUOUS));
            let ante: Vec<(usize, &String)> = doc
                .pairs
                .iter()
                .enumerate()
                .flat_map(|(i, (s, _))| s.iter().filter(|t| t.starts_with('A') && *t != AMBIGUOUS).map(move |t| (i, t)))
                .collect();
            assert_eq!(ante.len(), 1);
            let (ai, tok) = ante[0];
            assert!(ai < row.sentence && row.sentence - ai <= c.max_distance);
            assert_eq!(&tok[1..], &row.token[1..]);
            for (s, t) in &doc.pairs {
                assert_eq!(s.len(), t.len());
            }
        }
    }

    #[test]
    fn translation_is_determined_by_antecedent() {
        let (docs, truth) = gen_synthetic(&cfg(11, 4)).unwrap();
        let mut seen: HashMap<String, String> = HashMap::new();
        for (doc, row) in docs.iter().zip(&truth) {
            let a = doc.sources().flatten().find(|t| t.starts_with('A') && *t != AMBIGUOUS).unwrap().clone();
            assert_eq!(seen.entry(a).or_insert_with(|| row.token.clone()), &row.token);
        }
    }

    #[test]
    fn majority_baseline_near_chance() {
        let (_, truth) = gen_synthetic(&SyntheticConfig { n_docs: 4000, ..cfg(5, 4) }).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in &truth {
            *counts.entry(&r.token).or_default() += 1;
        }
        let best = *counts.values().max().unwrap() as f64 / truth.len() as f64;
        assert!((best - 0.25).abs() < 0.03, "{best}");

        let (_, truth) = gen_synthetic(&cfg(5, 1)).unwrap();
        assert!(truth.iter().all(|r| r.token == "r0"));
    }

    #[test]
    fn ground_truth_round_trip() {
        let (_, truth) = gen_synthetic(&cfg(1, 3)).unwrap();
        let mut buf = Vec::new();
        write_ground_truth(&mut buf, &truth).unwrap();
        assert_eq!(read_ground_truth(buf.as_slice()).unwrap(), truth);
        assert!(read_ground_truth("doc\t0\t0\tx\n".as_bytes()).is_err());
    }

    #[test]
    fn accuracy_scoring() {
        let rows = vec![
            GroundTruth { doc: "0".into(), sentence: 1, position: 0, token: "r1".into() },
            GroundTruth { doc: "1".into(), sentence: 1, position: 2, token: "r0".into() },
        ];
        let acc = ambiguous_accuracy(&rows, |d, _| {
            Some(if d == "0" { vec!["r1".to_string()] } else { vec!["w1".to_string()] })
        });
        assert_eq!(acc, 0.5);
    }
}
