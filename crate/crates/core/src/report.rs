//! Attention trace dumps and their rendering.
//!
//! Dump format: one JSON object per line with the fields of [`TraceRecord`]:
//! `doc_id`, `sentence`, `position`, `site` (`enc`, `dec_target`,
//! `dec_source`, `dec_alignment`), `query_token`, `sentence_weights`
//! (`[heads][k]`, oldest context sentence first), `word_weights`
//! (`[k][heads][len_j]`) and `context_tokens` (`[k][len_j]` surface forms).

use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::corpus::MonoDocument;
use crate::error::{Error, Result};
use crate::han::{AttentionTrace, Site};
use crate::vocab::{Vocabulary, EOS, SPECIALS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub doc_id: String,
    pub sentence: usize,
    pub position: usize,
    pub site: Site,
    /// Input token at `position` (the decoder input for decoder sites).
    pub query_token: String,
    pub sentence_weights: Vec<Vec<f64>>,
    pub word_weights: Vec<Vec<Vec<f64>>>,
    pub context_tokens: Vec<Vec<String>>,
}

impl TraceRecord {
    /// Converts ids to surface forms. Query and context tokens of source-side
    /// sites come from `src`, the rest from `tgt`.
    pub fn from_trace(doc_id: &str, t: &AttentionTrace, src: &Vocabulary, tgt: &Vocabulary) -> Self {
        let query_vocab = if t.site == Site::Enc { src } else { tgt };
        let ctx_vocab = if t.site.reads_source() { src } else { tgt };
        Self {
            doc_id: doc_id.to_string(),
            sentence: t.sentence,
            position: t.position,
            site: t.site,
            query_token: query_vocab.token(t.query_token).to_string(),
            sentence_weights: t.sentence_weights.clone(),
            word_weights: t.word_weights.clone(),
            context_tokens: t.context_tokens.iter().map(|s| ctx_vocab.decode(s)).collect(),
        }
    }

    /// Sentence weights averaged over heads.
    pub fn sentence_intensities(&self) -> Vec<f64> {
        head_mean(&self.sentence_weights)
    }

    /// Word weights of context sentence `j` averaged over heads.
    pub fn word_intensities(&self, j: usize) -> Vec<f64> {
        head_mean(&self.word_weights[j])
    }

    fn check_shape(&self) -> std::result::Result<(), String> {
        let k = self.context_tokens.len();
        if k == 0 {
            return Err("no context sentences".into());
        }
        if self.sentence_weights.iter().any(|h| h.len() != k) || self.sentence_weights.is_empty() {
            return Err(format!("sentence weights do not cover {k} context sentences"));
        }
        if self.word_weights.len() != k {
            return Err("word weights do not match the context sentences".into());
        }
        for (j, w) in self.word_weights.iter().enumerate() {
            if w.is_empty() || w.iter().any(|h| h.len() != self.context_tokens[j].len()) {
                return Err(format!("word weights of context sentence {j} do not match its tokens"));
            }
        }
        Ok(())
    }
}

fn head_mean(w: &[Vec<f64>]) -> Vec<f64> {
    let n = w.first().map_or(0, Vec::len);
    (0..n).map(|i| w.iter().map(|h| h[i]).sum::<f64>() / w.len() as f64).collect()
}

pub fn write_traces(records: &[TraceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("trace serializes"));
        s.push('\n');
    }
    s
}

pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Trace(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Trace(format!("record {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Svg,
}

const SHADES: [char; 5] = [' ', '░', '▒', '▓', '█'];

/// Shading character for an intensity in `[0, 1]`.
pub fn shade(w: f64) -> char {
    SHADES[((w.clamp(0.0, 1.0) * 4.0).round() as usize).min(4)]
}

/// Checks a record against the source side of the corpus it came from.
fn validate(idx: usize, r: &TraceRecord, corpus: &[MonoDocument]) -> Result<()> {
    let fail = |m: String| Error::Trace(format!("record {} (doc {}, sentence {}, position {}): {m}", idx + 1, r.doc_id, r.sentence, r.position));
    r.check_shape().map_err(fail)?;
    let doc = corpus.iter().find(|d| d.id == r.doc_id).ok_or_else(|| fail("document not in corpus".into()))?;
    if r.sentence >= doc.sentences.len() {
        return Err(fail(format!("document has only {} sentences", doc.sentences.len())));
    }
    let k = r.context_tokens.len();
    if k > r.sentence {
        return Err(fail(format!("{k} context sentences before sentence {}", r.sentence)));
    }
    if r.site == Site::Enc && r.position >= doc.sentences[r.sentence].len() + 1 {
        return Err(fail("position beyond the sentence".into()));
    }
    if r.site.reads_source() {
        let eos = SPECIALS[EOS];
        for (j, toks) in r.context_tokens.iter().enumerate() {
            let expected = &doc.sentences[r.sentence - k + j];
            let words: Vec<&String> = toks.iter().filter(|t| *t != eos).collect();
            let matches = words.len() == expected.len()
                && words.iter().zip(expected).all(|(a, b)| *a == b || *a == SPECIALS[crate::vocab::UNK]);
            if !matches {
                return Err(fail(format!("context sentence {} does not match the corpus", r.sentence - k + j)));
            }
        }
    }
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders every record, validated against `corpus` (source side).
pub fn render_attention_report(records: &[TraceRecord], corpus: &[MonoDocument], format: ReportFormat, per_head: bool) -> Result<String> {
    for (i, r) in records.iter().enumerate() {
        validate(i, r, corpus)?;
    }
    Ok(match format {
        ReportFormat::Text => render_text(records, per_head),
        ReportFormat::Svg => render_svg(records, per_head),
    })
}

/// (label, sentence intensities, word intensities per sentence) views.
fn views(r: &TraceRecord, per_head: bool) -> Vec<(String, Vec<f64>, Vec<Vec<f64>>)> {
    let k = r.context_tokens.len();
    if per_head {
        (0..r.sentence_weights.len())
            .map(|h| (format!("head {h}"), r.sentence_weights[h].clone(), (0..k).map(|j| r.word_weights[j][h].clone()).collect()))
            .collect()
    } else {
        vec![("mean".to_string(), r.sentence_intensities(), (0..k).map(|j| r.word_intensities(j)).collect())]
    }
}

fn render_text(records: &[TraceRecord], per_head: bool) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "doc {} sentence {} position {} [{}] query {}", r.doc_id, r.sentence, r.position, r.site, r.query_token);
        let k = r.context_tokens.len();
        for (label, sw, ww) in views(r, per_head) {
            if per_head {
                let _ = writeln!(s, "  {label}");
            }
            for j in 0..k {
                let words: Vec<String> = r.context_tokens[j].iter().zip(&ww[j]).map(|(t, &w)| format!("{}{t}", shade(w))).collect();
                let _ = writeln!(s, "  [-{}] {} {:.3} | {}", k - j, shade(sw[j]), sw[j], words.join(" "));
            }
        }
        s.push('\n');
    }
    s
}

fn render_svg(records: &[TraceRecord], per_head: bool) -> String {
    const LINE: f64 = 20.0;
    const CHAR: f64 = 8.0;
    let mut body = String::new();
    let mut y = LINE;
    let mut width: f64 = 400.0;
    for r in records {
        let _ = writeln!(
            body,
            r#"<text x="4" y="{y}" font-weight="bold">doc {} sentence {} position {} [{}] query {}</text>"#,
            escape(&r.doc_id), r.sentence, r.position, r.site, escape(&r.query_token)
        );
        y += LINE;
        let k = r.context_tokens.len();
        for (label, sw, ww) in views(r, per_head) {
            if per_head {
                let _ = writeln!(body, r#"<text x="12" y="{y}">{label}</text>"#);
                y += LINE;
            }
            for j in 0..k {
                let _ = writeln!(body, r#"<rect x="12" y="{}" width="48" height="16" fill="navy" fill-opacity="{:.4}"/>"#, y - 13.0, sw[j]);
                let _ = writeln!(body, r#"<text x="16" y="{y}" fill="white">{:.2}</text>"#, sw[j]);
                let mut x = 72.0;
                for (t, &w) in r.context_tokens[j].iter().zip(&ww[j]) {
                    let wpx = (t.chars().count() as f64 + 1.0) * CHAR;
                    let _ = writeln!(body, r#"<rect x="{x}" y="{}" width="{wpx}" height="16" fill="darkred" fill-opacity="{w:.4}"/>"#, y - 13.0);
                    let _ = writeln!(body, r#"<text x="{}" y="{y}">{}</text>"#, x + CHAR / 2.0, escape(t));
                    x += wpx + 2.0;
                }
                width = width.max(x + 8.0);
                y += LINE;
            }
        }
        y += LINE / 2.0;
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{y}\" font-family=\"monospace\" font-size=\"12\">\n{body}</svg>\n"
    )
}
