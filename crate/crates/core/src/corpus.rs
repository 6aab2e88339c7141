//! Document-aligned parallel corpora and document-ordered batch planning.
//!
//! Corpus files are UTF-8, one whitespace-tokenized sentence per line. A line
//! consisting exactly of the boundary marker (default `<DOC>`) starts a new
//! document; in a parallel pair the markers must sit on the same lines.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, BOS, EOS};

pub const DOC_MARKER: &str = "<DOC>";

pub type Sentence = Vec<String>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    /// (source, target) sentence pairs in discourse order.
    pub pairs: Vec<(Sentence, Sentence)>,
}

impl Document {
    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(s, _)| s)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(_, t)| t)
    }
}

/// One side of a corpus: documents as lists of sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonoDocument {
    pub id: String,
    pub sentences: Vec<Sentence>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn tokenize(line: &str) -> Sentence {
    line.split_whitespace().map(String::from).collect()
}

/// Splits lines into documents at marker lines; empty documents are dropped.
fn split_docs(lines: &[String], marker: &str) -> Vec<Vec<usize>> {
    let mut docs = vec![Vec::new()];
    for (i, line) in lines.iter().enumerate() {
        if line == marker {
            docs.push(Vec::new());
        } else {
            docs.last_mut().unwrap().push(i);
        }
    }
    docs.retain(|d| !d.is_empty());
    docs
}

/// Parses a parallel corpus from in-memory line lists.
pub fn parse_parallel(source: &[String], target: &[String], marker: &str) -> Result<Vec<Document>> {
    if source.len() != target.len() {
        return Err(Error::Corpus(format!(
            "source has {} lines but target has {}",
            source.len(),
            target.len()
        )));
    }
    for (i, (s, t)) in source.iter().zip(target).enumerate() {
        if (s == marker) != (t == marker) {
            return Err(Error::Corpus(format!("document marker mismatch at line {}", i + 1)));
        }
    }
    Ok(split_docs(source, marker)
        .into_iter()
        .enumerate()
        .map(|(n, idx)| Document {
            id: n.to_string(),
            pairs: idx.iter().map(|&i| (tokenize(&source[i]), tokenize(&target[i]))).collect(),
        })
        .collect())
}

/// Reads a line-aligned source/target file pair.
pub fn load_corpus(source: &Path, target: &Path, marker: &str) -> Result<Vec<Document>> {
    let (s, t) = (read_lines(source)?, read_lines(target)?);
    parse_parallel(&s, &t, marker)
        .map_err(|e| Error::Corpus(format!("{} / {}: {e}", source.display(), target.display())))
}

pub fn parse_mono(lines: &[String], marker: &str) -> Vec<MonoDocument> {
    split_docs(lines, marker)
        .into_iter()
        .enumerate()
        .map(|(n, idx)| MonoDocument { id: n.to_string(), sentences: idx.iter().map(|&i| tokenize(&lines[i])).collect() })
        .collect()
}

/// Reads one side of a corpus (translation input, candidates, references).
pub fn load_mono(path: &Path, marker: &str) -> Result<Vec<MonoDocument>> {
    Ok(parse_mono(&read_lines(path)?, marker))
}

/// Writes documents in the corpus format, each preceded by a marker line.
pub fn write_mono<W: Write>(out: &mut W, docs: &[MonoDocument], marker: &str) -> std::io::Result<()> {
    for d in docs {
        writeln!(out, "{marker}")?;
        for s in &d.sentences {
            writeln!(out, "{}", s.join(" "))?;
        }
    }
    Ok(())
}

pub fn split_sides(docs: &[Document]) -> (Vec<MonoDocument>, Vec<MonoDocument>) {
    docs.iter()
        .map(|d| {
            (
                MonoDocument { id: d.id.clone(), sentences: d.sources().cloned().collect() },
                MonoDocument { id: d.id.clone(), sentences: d.targets().cloned().collect() },
            )
        })
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Vocabulary over one side of the corpus.
pub fn build_vocab(docs: &[Document], cap: usize, side: Side) -> Result<Vocabulary> {
    Vocabulary::build(
        docs.iter().flat_map(|d| d.pairs.iter()).map(|(s, t)| match side {
            Side::Source => s.as_slice(),
            Side::Target => t.as_slice(),
        }),
        cap,
    )
}

/// A sentence pair as model inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    /// Source ids followed by EOS.
    pub source: Vec<usize>,
    /// BOS followed by target ids.
    pub target_in: Vec<usize>,
    /// Target ids followed by EOS.
    pub target_out: Vec<usize>,
}

impl EncodedPair {
    pub fn new(src: &Vocabulary, tgt: &Vocabulary, source: &[String], target: &[String]) -> Self {
        let mut s = src.encode(source);
        s.push(EOS);
        let t = tgt.encode(target);
        let mut target_in = vec![BOS];
        target_in.extend(&t);
        let mut target_out = t;
        target_out.push(EOS);
        Self { source: s, target_in, target_out }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDocument {
    pub id: String,
    pub pairs: Vec<EncodedPair>,
}

pub fn encode_documents(docs: &[Document], src: &Vocabulary, tgt: &Vocabulary) -> Vec<EncodedDocument> {
    docs.iter()
        .map(|d| EncodedDocument {
            id: d.id.clone(),
            pairs: d.pairs.iter().map(|(s, t)| EncodedPair::new(src, tgt, s, t)).collect(),
        })
        .collect()
}

/// Source ids (with EOS) for a monolingual document.
pub fn encode_source(doc: &MonoDocument, src: &Vocabulary) -> Vec<Vec<usize>> {
    doc.sentences
        .iter()
        .map(|s| {
            let mut ids = src.encode(s);
            ids.push(EOS);
            ids
        })
        .collect()
}

/// Ordered training steps; each step is a set of (document index, sentence index).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchPlan {
    pub steps: Vec<Vec<(usize, usize)>>,
}

impl BatchPlan {
    /// True when every document's sentence `n` comes in a strictly later step
    /// than its sentence `n - 1`, and every sentence appears exactly once.
    pub fn is_document_ordered(&self, doc_lengths: &[usize]) -> bool {
        let mut last_step: Vec<Option<usize>> = vec![None; doc_lengths.len()];
        let mut next: Vec<usize> = vec![0; doc_lengths.len()];
        for (si, step) in self.steps.iter().enumerate() {
            for &(d, n) in step {
                if d >= doc_lengths.len() || n != next[d] || last_step[d] == Some(si) {
                    return false;
                }
                next[d] += 1;
                last_step[d] = Some(si);
            }
        }
        next == doc_lengths
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Groups sentences of shuffled documents into steps of at most
/// `max_tokens` source tokens. Each document contributes at most one sentence
/// per step, in order, so a sentence's predecessors are always processed (and
/// cached) first. A sentence longer than the budget gets a step of its own.
pub fn plan_batches(source_lengths: &[Vec<usize>], max_tokens: usize, seed: u64) -> BatchPlan {
    let mut order: Vec<usize> = (0..source_lengths.len()).filter(|&d| !source_lengths[d].is_empty()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut queue = order.into_iter();
    let mut pending = queue.next();
    // (document, next sentence)
    let mut active: Vec<(usize, usize)> = Vec::new();
    let mut steps = Vec::new();
    loop {
        let mut step = Vec::new();
        let mut tokens = 0;
        let fits = |len: usize, step: &Vec<(usize, usize)>, tokens: &mut usize| {
            if step.is_empty() || *tokens + len <= max_tokens {
                *tokens += len;
                true
            } else {
                false
            }
        };
        for &(d, n) in &active {
            if !fits(source_lengths[d][n], &step, &mut tokens) {
                break;
            }
            step.push((d, n));
        }
        if step.len() == active.len() {
            while let Some(d) = pending {
                if !fits(source_lengths[d][0], &step, &mut tokens) {
                    break;
                }
                step.push((d, 0));
                active.push((d, 0));
                pending = queue.next();
            }
        }
        if step.is_empty() {
            break;
        }
        let taken: Vec<usize> = step.iter().map(|&(d, _)| d).collect();
        for a in active.iter_mut() {
            if taken.contains(&a.0) {
                a.1 += 1;
            }
        }
        active.retain(|&(d, n)| n < source_lengths[d].len());
        steps.push(step);
    }
    BatchPlan { steps }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn no_markers_single_document() {
        let l = lines(&["a b", "c", "d e f"]);
        let docs = parse_parallel(&l, &l, DOC_MARKER).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].pairs.len(), 3);
        assert_eq!(docs[0].pairs[2].0, vec!["d", "e", "f"]);
    }

    #[test]
    fn markers_split_documents() {
        // markers before sentence 0 and before sentence 2 of N = 5 sentences
        let l = lines(&["<DOC>", "s0", "s1", "<DOC>", "s2", "s3", "s4"]);
        let docs = parse_parallel(&l, &l, DOC_MARKER).unwrap();
        assert_eq!(docs.iter().map(|d| d.pairs.len()).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(docs[1].id, "1");
    }

    #[test]
    fn marker_mismatch_names_line() {
        let s = lines(&["a", "<DOC>", "b"]);
        let t = lines(&["a", "x", "b"]);
        let err = parse_parallel(&s, &t, DOC_MARKER).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(parse_parallel(&s, &t[..2], DOC_MARKER).is_err());
    }

    #[test]
    fn mono_round_trip() {
        let l = lines(&["<DOC>", "a b", "c", "<DOC>", "d"]);
        let docs = parse_mono(&l, DOC_MARKER);
        let mut out = Vec::new();
        write_mono(&mut out, &docs, DOC_MARKER).unwrap();
        let back: Vec<String> = String::from_utf8(out).unwrap().lines().map(String::from).collect();
        assert_eq!(back, l);
    }

    #[test]
    fn encoded_pair_layout() {
        let v = Vocabulary::from_tokens(["a", "b"]).unwrap();
        let p = EncodedPair::new(&v, &v, &lines(&["a", "b"]), &lines(&["b"]));
        assert_eq!(p.source, vec![4, 5, EOS]);
        assert_eq!(p.target_in, vec![BOS, 5]);
        assert_eq!(p.target_out, vec![5, EOS]);
    }

    #[test]
    fn plan_examples() {
        let p = plan_batches(&[vec![3, 3, 3]], 100, 0);
        assert_eq!(p.steps, vec![vec![(0, 0)], vec![(0, 1)], vec![(0, 2)]]);

        let p = plan_batches(&[vec![2, 2], vec![2, 2]], 100, 0);
        assert_eq!(p.len(), 2);
        assert!(p.steps.iter().all(|s| s.len() == 2));

        let a = plan_batches(&[vec![2, 5], vec![3], vec![4, 4, 4]], 6, 42);
        assert_eq!(a, plan_batches(&[vec![2, 5], vec![3], vec![4, 4, 4]], 6, 42));
    }

    #[test]
    fn oversized_sentence_gets_its_own_step() {
        let p = plan_batches(&[vec![50], vec![2]], 10, 1);
        assert!(p.steps.iter().any(|s| s == &vec![(0, 0)]));
        assert!(p.is_document_ordered(&[1, 1]));
    }

    proptest! {
        #[test]
        fn plans_are_document_ordered(
            docs in proptest::collection::vec(proptest::collection::vec(1usize..12, 1..6), 1..12),
            budget in 1usize..40,
            seed in 0u64..1000,
        ) {
            let p = plan_batches(&docs, budget, seed);
            let lens: Vec<usize> = docs.iter().map(Vec::len).collect();
            prop_assert!(p.is_document_ordered(&lens));
            for step in &p.steps {
                let tokens: usize = step.iter().map(|&(d, n)| docs[d][n]).sum();
                prop_assert!(step.len() == 1 || tokens <= budget);
            }
        }
    }
}
