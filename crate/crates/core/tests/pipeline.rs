mod common;

use std::fs;

use hanmt::checkpoint::Checkpoint;
use hanmt::corpus::{load_mono, split_sides, write_mono, DOC_MARKER};
use hanmt::decode::{translate_document, DecodeOptions};
use hanmt::experiment::{corpus_text, sized_config, translate_all, Dataset};
use hanmt::model::{Context, Model};
use hanmt::report::{read_traces, write_traces, ReportFormat};
use hanmt::train::{stage2_model, Recorder, Silent};
use hanmt::{load_corpus, render_attention_report, train_stage1, train_stage2, Error, HanMode, ModelConfig, RunConfig, TrainConfig};

fn dataset(n_docs: usize) -> Dataset {
    let docs = common::small_synthetic(5, n_docs);
    let (test, _) = hanmt::gen_synthetic(&hanmt::SyntheticConfig { seed: 6, n_docs: 3, doc_len: 3, max_distance: 2, ..Default::default() }).unwrap();
    let cfg = ModelConfig { max_len: 16, ..common::tiny_config(HanMode::None) };
    Dataset::new(docs, Vec::new(), test, Vec::new(), &ModelConfig { vocab_src: 1000, vocab_tgt: 1000, ..cfg }).unwrap()
}

fn tiny_model(data: &Dataset, mode: HanMode) -> ModelConfig {
    let base = ModelConfig { max_len: 16, ..common::tiny_config(mode) };
    sized_config(&base, data)
}

fn short_run(stage: u8) -> TrainConfig {
    TrainConfig { warmup_steps: 5, max_steps: 8, max_tokens_per_step: 60, stage, ..Default::default() }
}

#[test]
fn checkpoint_file_round_trip_keeps_model_and_optimizer() {
    let data = dataset(8);
    let mut model = Model::new(tiny_model(&data, HanMode::Joint), 2).unwrap();
    let out = train_stage2(&mut model, &data.train_enc, None, &short_run(2), &mut Silent).unwrap();
    let ck = Checkpoint::from_model(&model, 2, out.steps, &data.src_vocab, &data.tgt_vocab, Some(&out.optimizer.state));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ck");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), fs::read(&path).unwrap());
    assert_eq!(back.optimizer.as_ref().unwrap().step, out.optimizer.state.step);

    let restored = back.to_model().unwrap();
    let (src, _) = split_sides(&data.test);
    let opts = DecodeOptions::default();
    let a = translate_all(&model, &data.src_vocab, &data.tgt_vocab, &src, &opts, None).unwrap();
    let b = translate_all(&restored, &back.src_vocab, &back.tgt_vocab, &src, &opts, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let data = dataset(2);
    let model = Model::new(tiny_model(&data, HanMode::None), 2).unwrap();
    let bytes = Checkpoint::from_model(&model, 1, 0, &data.src_vocab, &data.tgt_vocab, None).to_bytes().unwrap();
    for cut in [4, 20, bytes.len() / 2, bytes.len() - 3] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let missing = tempfile::tempdir().unwrap().path().join("none.ck");
    assert!(matches!(Checkpoint::load(&missing), Err(Error::Io { .. })));
}

#[test]
fn stage_two_starts_from_stage_one_weights_in_every_mode() {
    let data = dataset(6);
    let mut m1 = Model::new(tiny_model(&data, HanMode::None), 4).unwrap();
    train_stage1(&mut m1, &data.train_enc, None, &short_run(1), &mut Silent).unwrap();
    let ck = Checkpoint::from_model(&m1, 1, 8, &data.src_vocab, &data.tgt_vocab, None);
    for mode in HanMode::ALL {
        let m2 = stage2_model(&ck, mode, 2, 1).unwrap();
        for (_, p) in m1.store.iter() {
            let id = m2.store.id(&p.name).unwrap();
            assert_eq!(m2.store.value(id), &p.value, "{mode} {}", p.name);
        }
        let extra = m2.store.len() - m1.store.len();
        assert_eq!(extra > 0, mode != HanMode::None, "{mode}");
    }
    let wider = ModelConfig { d_model: 16, ..ck.config.clone() };
    assert!(hanmt::train::stage2_model_with(&ck, wider, 1).is_err());
}

#[test]
fn stage_two_updates_every_parameter() {
    let data = dataset(12);
    for mode in HanMode::ALL.into_iter().filter(|m| *m != HanMode::None) {
        let mut model = Model::new(tiny_model(&data, mode), 8).unwrap();
        let before = model.store.clone();
        train_stage2(&mut model, &data.train_enc, None, &TrainConfig { max_steps: 20, ..short_run(2) }, &mut Silent).unwrap();
        let frozen: Vec<&str> = before
            .iter()
            .filter(|(id, p)| model.store.value(*id) == &p.value)
            .map(|(_, p)| p.name.as_str())
            .collect();
        assert!(frozen.is_empty(), "{mode}: never updated {frozen:?}");
    }
}

#[test]
fn training_log_is_ordered_and_finite() {
    let data = dataset(6);
    let mut model = Model::new(tiny_model(&data, HanMode::None), 1).unwrap();
    let mut rec = Recorder::default();
    train_stage1(&mut model, &data.train_enc, Some(&data.train_enc[..2]), &TrainConfig { checkpoint_interval: 4, ..short_run(1) }, &mut rec).unwrap();
    assert_eq!(rec.records.len(), 8);
    for (i, r) in rec.records.iter().enumerate() {
        assert_eq!(r.step, i as u64 + 1);
        assert_eq!(r.stage, 1);
        assert!(r.loss.is_finite() && r.lr > 0.0 && r.tokens > 0 && r.tokens_per_sec > 0.0);
        assert_eq!(r.dev_loss.is_some(), r.step % 4 == 0);
        let line: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(line["step"], r.step);
    }
}

#[test]
fn corpus_files_round_trip_and_traces_render() {
    let data = dataset(4);
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = split_sides(&data.train);
    let (sp, tp) = (dir.path().join("train.src"), dir.path().join("train.tgt"));
    for (p, docs) in [(&sp, &src), (&tp, &tgt)] {
        let mut f = fs::File::create(p).unwrap();
        write_mono(&mut f, docs, DOC_MARKER).unwrap();
    }
    let loaded = load_corpus(&sp, &tp, DOC_MARKER).unwrap();
    assert_eq!(loaded.len(), data.train.len());
    for (a, b) in loaded.iter().zip(&data.train) {
        assert_eq!(a.pairs, b.pairs);
    }
    assert_eq!(load_mono(&sp, DOC_MARKER).unwrap().len(), src.len());

    let model = Model::new(tiny_model(&data, HanMode::Joint), 3).unwrap();
    let (test_src, _) = split_sides(&data.test);
    let mut records = Vec::new();
    let out = translate_all(&model, &data.src_vocab, &data.tgt_vocab, &test_src, &DecodeOptions::default(), Some(&mut records)).unwrap();
    assert_eq!(out.len(), test_src.len());
    assert!(corpus_text(&out).starts_with(DOC_MARKER));
    assert!(!records.is_empty());
    let text = write_traces(&records);
    let back = read_traces(text.as_bytes()).unwrap();
    assert_eq!(back, records);
    for r in &back {
        let total: f64 = r.sentence_intensities().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    let report = render_attention_report(&back, &test_src, ReportFormat::Text, false).unwrap();
    assert!(report.contains(&back[0].doc_id));
    let svg = render_attention_report(&back, &test_src, ReportFormat::Svg, true).unwrap();
    assert!(svg.starts_with("<svg") || svg.contains("<svg"));
    // a record pointing at a document the corpus does not have
    let mut wrong = back.clone();
    wrong[0].doc_id = "missing".into();
    let err = render_attention_report(&wrong, &test_src, ReportFormat::Text, false).unwrap_err().to_string();
    assert!(err.contains("record 1 ") && err.contains("missing"), "{err}");
}

#[test]
fn sentence_level_decoding_matches_a_fresh_cache() {
    let data = dataset(3);
    let model = Model::new(tiny_model(&data, HanMode::None), 5).unwrap();
    let (src, _) = split_sides(&data.test);
    let ids = hanmt::corpus::encode_source(&src[0], &data.src_vocab);
    let whole = translate_document(&model, &ids, &DecodeOptions::default(), None).unwrap();
    for (n, s) in ids.iter().enumerate() {
        let alone = translate_document(&model, std::slice::from_ref(s), &DecodeOptions::default(), None).unwrap();
        assert_eq!(alone[0], whole[n]);
    }
    let cache = model.cache();
    assert!(Context::off(&cache).traces.is_none());
}

#[test]
fn run_config_round_trips_through_toml() {
    let text = r#"
[model]
d_model = 16
n_heads = 2
han_heads = 2
han_mode = "decoder_source"
k = 5

[train]
max_steps = 10
warmup_steps = 4

[stage2]
max_steps = 3
"#;
    let cfg = RunConfig::from_toml(text).unwrap();
    assert_eq!(cfg.model.han_mode, HanMode::DecoderSource);
    assert_eq!(cfg.stage(2).max_steps, 3);
    assert_eq!(cfg.stage(2).stage, 2);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    assert!(RunConfig::from_toml("[model]\nd_model = 15\n").is_err());
    assert!(RunConfig::from_toml("[model]\nunknown = 1\n").is_err());
}
