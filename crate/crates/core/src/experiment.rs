//! End-to-end runs on the synthetic context task.

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::corpus::{build_vocab, encode_documents, encode_source, split_sides, write_mono, Document, EncodedDocument, MonoDocument, Side, DOC_MARKER};
use crate::decode::{translate_document, DecodeOptions};
use crate::error::Result;
use crate::metrics::{evaluate, EvalResources};
use crate::model::Model;
use crate::report::{write_traces, TraceRecord};
use crate::synthetic::{ambiguous_accuracy, gen_synthetic, GroundTruth, SyntheticConfig};
use crate::train::{stage2_model_with, train_stage1, train_stage2, Silent, TrainConfig, TrainObserver};
use crate::transformer::{HanMode, ModelConfig};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Training-set generator; dev and test sets use the next two seeds.
    pub synthetic: SyntheticConfig,
    pub dev_docs: usize,
    pub test_docs: usize,
    /// Vocabulary sizes are filled in from the data.
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub target_mode: HanMode,
    pub beam_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig { n_docs: 2000, ..Default::default() },
            dev_docs: 100,
            test_docs: 200,
            model: ModelConfig {
                d_model: 32,
                n_heads: 4,
                n_layers_enc: 1,
                n_layers_dec: 1,
                d_ff: 64,
                dropout: 0.0,
                max_len: 32,
                k: 3,
                han_heads: 4,
                ..Default::default()
            },
            stage1: TrainConfig { warmup_steps: 200, max_steps: 600, max_tokens_per_step: 300, lr_scale: 2.0, ..Default::default() },
            stage2: TrainConfig { warmup_steps: 200, max_steps: 1000, max_tokens_per_step: 300, lr_scale: 2.0, stage: 2, ..Default::default() },
            target_mode: HanMode::Joint,
            beam_size: 1,
        }
    }
}

/// Train/dev/test documents with vocabularies built on the training side.
pub struct Dataset {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
    /// Ambiguous-token rows for the test set; may be empty.
    pub test_truth: Vec<GroundTruth>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub train_enc: Vec<EncodedDocument>,
    pub dev_enc: Vec<EncodedDocument>,
}

impl Dataset {
    /// Vocabulary caps are `vocab_src` and `vocab_tgt` of `model`.
    pub fn new(train: Vec<Document>, dev: Vec<Document>, test: Vec<Document>, test_truth: Vec<GroundTruth>, model: &ModelConfig) -> Result<Self> {
        let src_vocab = build_vocab(&train, model.vocab_src, Side::Source)?;
        let tgt_vocab = build_vocab(&train, model.vocab_tgt, Side::Target)?;
        let train_enc = encode_documents(&train, &src_vocab, &tgt_vocab);
        let dev_enc = encode_documents(&dev, &src_vocab, &tgt_vocab);
        Ok(Self { train, dev, test, test_truth, src_vocab, tgt_vocab, train_enc, dev_enc })
    }

    fn dev_set(&self) -> Option<&[EncodedDocument]> {
        (!self.dev_enc.is_empty()).then_some(self.dev_enc.as_slice())
    }
}

/// Generates the synthetic train, dev and test sets.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (train, _) = gen_synthetic(&cfg.synthetic)?;
    let (dev, _) = gen_synthetic(&SyntheticConfig { seed: cfg.synthetic.seed + 1, n_docs: cfg.dev_docs, ..cfg.synthetic.clone() })?;
    let (test, test_truth) = gen_synthetic(&SyntheticConfig { seed: cfg.synthetic.seed + 2, n_docs: cfg.test_docs, ..cfg.synthetic.clone() })?;
    Dataset::new(train, dev, test, test_truth, &cfg.model)
}

/// Model config with vocabulary sizes taken from the data.
pub fn sized_config(cfg: &ModelConfig, data: &Dataset) -> ModelConfig {
    ModelConfig { vocab_src: data.src_vocab.len(), vocab_tgt: data.tgt_vocab.len(), ..cfg.clone() }
}

/// Trains a context-free model and returns it with its checkpoint.
pub fn run_stage1(cfg: &ExperimentConfig, data: &Dataset, obs: &mut dyn TrainObserver) -> Result<(Model, Checkpoint)> {
    let mcfg = ModelConfig { han_mode: HanMode::None, ..sized_config(&cfg.model, data) };
    let mut model = Model::new(mcfg, cfg.stage1.seed)?;
    let out = train_stage1(&mut model, &data.train_enc, data.dev_set(), &cfg.stage1, obs)?;
    let ck = Checkpoint::from_model(&model, 1, out.best_step, &data.src_vocab, &data.tgt_vocab, Some(&out.optimizer.state));
    Ok((model, ck))
}

pub fn run_stage2(cfg: &ExperimentConfig, data: &Dataset, stage1: &Checkpoint, mode: HanMode, k: usize, obs: &mut dyn TrainObserver) -> Result<(Model, Checkpoint)> {
    let mcfg = ModelConfig { han_mode: mode, k, ..stage1.config.clone() };
    let mut model = stage2_model_with(stage1, mcfg, cfg.stage2.seed)?;
    let out = train_stage2(&mut model, &data.train_enc, data.dev_set(), &cfg.stage2, obs)?;
    let ck = Checkpoint::from_model(&model, 2, out.best_step, &data.src_vocab, &data.tgt_vocab, Some(&out.optimizer.state));
    Ok((model, ck))
}

/// Document-sequential translations of `docs` with optional trace records.
pub fn translate_all(model: &Model, src: &Vocabulary, tgt: &Vocabulary, docs: &[MonoDocument], opts: &DecodeOptions, traces: Option<&mut Vec<TraceRecord>>) -> Result<Vec<MonoDocument>> {
    let mut out = Vec::with_capacity(docs.len());
    let mut records = traces;
    for d in docs {
        let mut raw = Vec::new();
        let ids = translate_document(model, &encode_source(d, src), opts, records.as_ref().map(|_| &mut raw))?;
        if let Some(r) = records.as_deref_mut() {
            r.extend(raw.iter().map(|t| TraceRecord::from_trace(&d.id, t, src, tgt)));
        }
        out.push(MonoDocument { id: d.id.clone(), sentences: ids.iter().map(|s| tgt.decode(s)).collect() });
    }
    Ok(out)
}

pub fn corpus_text(docs: &[MonoDocument]) -> String {
    let mut buf = Vec::new();
    write_mono(&mut buf, docs, DOC_MARKER).expect("writing to memory");
    String::from_utf8(buf).expect("tokens are UTF-8")
}

pub fn accuracy_on(truth: &[GroundTruth], out: &[MonoDocument]) -> f64 {
    ambiguous_accuracy(truth, |doc, s| out.iter().find(|d| d.id == doc).and_then(|d| d.sentences.get(s).cloned()))
}

#[derive(Debug, Clone)]
pub struct SystemResult {
    pub checkpoint: Vec<u8>,
    pub translations: String,
    /// Ambiguous-token accuracy when the test set has ground truth.
    pub accuracy: Option<f64>,
    pub bleu: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub stage1: SystemResult,
    pub stage2: SystemResult,
    pub report: String,
    pub traces: String,
}

fn score(model: &Model, ck: &Checkpoint, data: &Dataset, opts: &DecodeOptions, traces: Option<&mut Vec<TraceRecord>>) -> Result<(SystemResult, String)> {
    let (src, refs) = split_sides(&data.test);
    let out = translate_all(model, &data.src_vocab, &data.tgt_vocab, &src, opts, traces)?;
    let report = evaluate(&out, &refs, &EvalResources::default())?;
    let accuracy = (!data.test_truth.is_empty()).then(|| accuracy_on(&data.test_truth, &out));
    let sys = SystemResult { checkpoint: ck.to_bytes()?, translations: corpus_text(&out), accuracy, bleu: report.bleu.score };
    Ok((sys, report.to_text()))
}

/// Stage 1, stage 2 in `target_mode`, then held-out evaluation of both.
pub fn run_synthetic(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_synthetic_with(cfg, &mut Silent)
}

pub fn run_synthetic_with(cfg: &ExperimentConfig, obs: &mut dyn TrainObserver) -> Result<ExperimentResult> {
    run_experiment(cfg, &prepare(cfg)?, obs)
}

fn acc_text(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"))
}

/// Both stages on `data`, then evaluation of both on its test set.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset, obs: &mut dyn TrainObserver) -> Result<ExperimentResult> {
    let opts = DecodeOptions { beam_size: cfg.beam_size, ..Default::default() };
    let (m1, c1) = run_stage1(cfg, data, obs)?;
    let (s1, r1) = score(&m1, &c1, data, &opts, None)?;
    let (m2, c2) = run_stage2(cfg, data, &c1, cfg.target_mode, cfg.model.k, obs)?;
    let mut traces = Vec::new();
    let (s2, r2) = score(&m2, &c2, data, &opts, Some(&mut traces))?;
    let mut report = String::new();
    let _ = writeln!(report, "held-out documents: {}", data.test.len());
    let _ = writeln!(report, "stage 1 (context-free): ambiguous-token accuracy {}", acc_text(s1.accuracy));
    report.push_str(&r1);
    let _ = writeln!(report, "stage 2 ({}): ambiguous-token accuracy {}", cfg.target_mode, acc_text(s2.accuracy));
    report.push_str(&r2);
    Ok(ExperimentResult { stage1: s1, stage2: s2, report, traces: write_traces(&traces) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub bleu: f64,
    pub accuracy: Option<f64>,
}

/// Trains stage 1 once, then stage 2 for each context size.
pub fn sweep_k(cfg: &ExperimentConfig, data: &Dataset, ks: &[usize], obs: &mut dyn TrainObserver) -> Result<Vec<SweepRow>> {
    let opts = DecodeOptions { beam_size: cfg.beam_size, ..Default::default() };
    let (_, c1) = run_stage1(cfg, data, obs)?;
    let mut rows = Vec::new();
    for &k in ks {
        let (m, c) = run_stage2(cfg, data, &c1, cfg.target_mode, k, obs)?;
        let (s, _) = score(&m, &c, data, &opts, None)?;
        rows.push(SweepRow { k, bleu: s.bleu, accuracy: s.accuracy });
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("k\tBLEU\tambiguous_acc\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.2}\t{}", r.k, r.bleu, acc_text(r.accuracy));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            synthetic: SyntheticConfig { n_docs: 12, doc_len: 3, max_distance: 2, ..Default::default() },
            dev_docs: 3,
            test_docs: 3,
            model: ModelConfig { d_model: 8, n_heads: 2, han_heads: 2, d_ff: 16, n_layers_enc: 1, n_layers_dec: 1, dropout: 0.0, max_len: 16, k: 2, ..Default::default() },
            stage1: TrainConfig { warmup_steps: 5, max_steps: 6, max_tokens_per_step: 40, checkpoint_interval: 3, ..Default::default() },
            stage2: TrainConfig { warmup_steps: 5, max_steps: 6, max_tokens_per_step: 40, stage: 2, checkpoint_interval: 3, ..Default::default() },
            target_mode: HanMode::Joint,
            beam_size: 1,
        }
    }

    #[test]
    fn pipeline_runs_and_repeats() {
        let a = run_synthetic(&tiny()).unwrap();
        let b = run_synthetic(&tiny()).unwrap();
        assert_eq!(a.stage2.checkpoint, b.stage2.checkpoint);
        assert_eq!(a.stage2.translations, b.stage2.translations);
        assert_eq!(a.report, b.report);
        assert!(!a.traces.is_empty());
        assert!(a.translations_docs() == 3);
    }

    #[test]
    fn sweep_has_a_row_per_k() {
        let cfg = tiny();
        let rows = sweep_k(&cfg, &prepare(&cfg).unwrap(), &[1, 3], &mut Silent).unwrap();
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(sweep_table(&rows).lines().count(), 3);
    }

    impl ExperimentResult {
        fn translations_docs(&self) -> usize {
            self.stage2.translations.lines().filter(|l| *l == DOC_MARKER).count()
        }
    }
}
