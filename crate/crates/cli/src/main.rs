use std::collections::HashSet;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hanmt::checkpoint::Checkpoint;
use hanmt::corpus::{encode_documents, load_corpus, load_mono, split_sides, DOC_MARKER};
use hanmt::decode::{DecodeOptions, DEFAULT_LENGTH_PENALTY, DEFAULT_MAX_LEN_FACTOR};
use hanmt::experiment::{accuracy_on, corpus_text, sized_config, sweep_k, sweep_table, translate_all, Dataset};
use hanmt::metrics::{evaluate, parse_word_list, Embeddings, EvalResources, Lexicon};
use hanmt::model::Model;
use hanmt::optim::Adam;
use hanmt::report::{read_traces, render_attention_report, write_traces, ReportFormat};
use hanmt::synthetic::{gen_synthetic, read_ground_truth, write_ground_truth, SyntheticConfig};
use hanmt::train::{stage2_model_with, train_stage1, train_stage2, LogRecord, TrainObserver};
use hanmt::{Error, HanMode, ModelConfig, Result, RunConfig};

#[derive(Parser)]
#[command(name = "hanmt", version, about = "Document-level translation with hierarchical context attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train stage 1 (sentence-level) or stage 2 (with context) from a config file.
    Train(TrainArgs),
    /// Translate documents sentence by sentence, carrying context.
    Translate(TranslateArgs),
    /// Score candidate translations against references.
    Evaluate(EvaluateArgs),
    /// Write a synthetic inter-sentence dependency corpus.
    GenSynthetic(GenArgs),
    /// Render an attention trace dump as text or SVG.
    Inspect(InspectArgs),
    /// Train stage 1 once, then stage 2 per context size, and tabulate.
    SweepK(SweepArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long, requires = "dev_tgt")]
    dev_src: Option<PathBuf>,
    #[arg(long, requires = "dev_src")]
    dev_tgt: Option<PathBuf>,
    /// Overrides `train.stage` from the config.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: Option<u8>,
    /// Stage-1 checkpoint (required for stage 2).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log, one JSON record per step.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value = DOC_MARKER)]
    marker: String,
}

#[derive(clap::Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = DEFAULT_LENGTH_PENALTY)]
    length_penalty: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN_FACTOR)]
    max_len_factor: f64,
    /// Attention trace dump (JSON lines).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value = DOC_MARKER)]
    marker: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Text,
    Jsonl,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    candidate: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Word list for pronoun accuracy.
    #[arg(long)]
    pronouns: Option<PathBuf>,
    /// Word list for noun accuracy.
    #[arg(long)]
    nouns: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Stopword list; enables lexical cohesion.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Synonym pairs used by lexical cohesion.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Word vectors; enables coherence.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Synthetic ground-truth table; adds ambiguous-token accuracy.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: OutFormat,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = DOC_MARKER)]
    marker: String,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Files are written as PREFIX.src, PREFIX.tgt and PREFIX.truth.tsv.
    #[arg(long, default_value = "synthetic")]
    prefix: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    docs: usize,
    #[arg(long, default_value_t = 4)]
    doc_len: usize,
    #[arg(long, default_value_t = 4)]
    alternatives: usize,
    #[arg(long, default_value_t = 20)]
    filler: usize,
    #[arg(long, default_value_t = 3)]
    max_distance: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 6)]
    max_len: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Text,
    Svg,
}

#[derive(clap::Args)]
struct InspectArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Source side of the translated corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportKind,
    /// One view per attention head instead of the head average.
    #[arg(long)]
    per_head: bool,
    #[arg(long, default_value = DOC_MARKER)]
    marker: String,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    test_src: PathBuf,
    #[arg(long)]
    test_tgt: PathBuf,
    #[arg(long, requires = "dev_tgt")]
    dev_src: Option<PathBuf>,
    #[arg(long, requires = "dev_src")]
    dev_tgt: Option<PathBuf>,
    /// Ground truth for the test set; adds an accuracy column.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7")]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = DOC_MARKER)]
    marker: String,
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

struct FileObserver {
    log: Option<fs::File>,
    ckpt: PathBuf,
    stage: u8,
    src: hanmt::Vocabulary,
    tgt: hanmt::Vocabulary,
}

impl TrainObserver for FileObserver {
    fn on_step(&mut self, r: &LogRecord) -> Result<()> {
        if let Some(f) = &mut self.log {
            writeln!(f, "{}", r.to_json()).map_err(|e| Error::io("training log", e))?;
        }
        if r.step % 100 == 0 {
            log::info!("stage {} step {} loss {:.4} lr {:.3e} {:.0} tok/s", r.stage, r.step, r.loss, r.lr, r.tokens_per_sec);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, step: u64, model: &Model, opt: &Adam) -> Result<()> {
        let path = PathBuf::from(format!("{}.step{step}", self.ckpt.display()));
        Checkpoint::from_model(model, self.stage, step, &self.src, &self.tgt, Some(&opt.state)).save(&path)
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let stage = a.stage.unwrap_or(cfg.train.stage);
    let tc = cfg.stage(stage);
    let docs = load_corpus(&a.src, &a.tgt, &a.marker)?;
    let dev = match (&a.dev_src, &a.dev_tgt) {
        (Some(s), Some(t)) => load_corpus(s, t, &a.marker)?,
        _ => Vec::new(),
    };
    let (mut model, src, tgt) = if stage == 1 {
        let data = Dataset::new(docs.clone(), dev.clone(), Vec::new(), Vec::new(), &cfg.model)?;
        let mcfg = ModelConfig { han_mode: HanMode::None, ..sized_config(&cfg.model, &data) };
        (Model::new(mcfg, tc.seed)?, data.src_vocab, data.tgt_vocab)
    } else {
        let init = a.init.as_ref().ok_or_else(|| Error::Config("stage 2 needs --init with a stage-1 checkpoint".into()))?;
        let ck = Checkpoint::load(init)?;
        let mcfg = ModelConfig { han_mode: cfg.model.han_mode, k: cfg.model.k, han_heads: cfg.model.han_heads, han_residual: cfg.model.han_residual, ..ck.config.clone() };
        (stage2_model_with(&ck, mcfg, tc.seed)?, ck.src_vocab, ck.tgt_vocab)
    };
    let train_enc = encode_documents(&docs, &src, &tgt);
    let dev_enc = encode_documents(&dev, &src, &tgt);
    let dev_ref = (!dev_enc.is_empty()).then_some(dev_enc.as_slice());
    let log = match &a.log {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut obs = FileObserver { log, ckpt: a.out.clone(), stage, src: src.clone(), tgt: tgt.clone() };
    let out = if stage == 1 {
        train_stage1(&mut model, &train_enc, dev_ref, &tc, &mut obs)?
    } else {
        train_stage2(&mut model, &train_enc, dev_ref, &tc, &mut obs)?
    };
    Checkpoint::from_model(&model, stage, out.best_step, &src, &tgt, Some(&out.optimizer.state)).save(&a.out)?;
    eprintln!(
        "stage {stage}: {} steps, final loss {:.4}{}",
        out.steps,
        out.final_loss,
        out.best_dev_loss.map(|d| format!(", best dev loss {d:.4} at step {}", out.best_step)).unwrap_or_default()
    );
    Ok(())
}

fn translate(a: TranslateArgs) -> Result<()> {
    if a.beam == 0 {
        return Err(Error::Config("--beam must be at least 1".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.to_model()?;
    let docs = load_mono(&a.input, &a.marker)?;
    let opts = DecodeOptions { beam_size: a.beam, length_penalty: a.length_penalty, max_len_factor: a.max_len_factor };
    let mut traces = Vec::new();
    let out = translate_all(&model, &ck.src_vocab, &ck.tgt_vocab, &docs, &opts, a.trace.as_ref().map(|_| &mut traces))?;
    let mut text = Vec::new();
    hanmt::corpus::write_mono(&mut text, &out, &a.marker).expect("writing to memory");
    write_out(a.output.as_deref(), &String::from_utf8(text).expect("UTF-8"))?;
    if let Some(p) = &a.trace {
        fs::write(p, write_traces(&traces)).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn word_set(p: &Option<PathBuf>) -> Result<Option<HashSet<String>>> {
    p.as_ref().map(|p| read_text(p).map(|t| parse_word_list(&t))).transpose()
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let cand = load_mono(&a.candidate, &a.marker)?;
    let refs = load_mono(&a.reference, &a.marker)?;
    let res = EvalResources {
        pronouns: word_set(&a.pronouns)?,
        nouns: word_set(&a.nouns)?,
        window: a.window,
        stopwords: word_set(&a.stopwords)?,
        lexicon: a.lexicon.as_ref().map(|p| read_text(p).and_then(|t| Lexicon::parse(&t))).transpose()?,
        embeddings: a.embeddings.as_ref().map(|p| read_text(p).and_then(|t| Embeddings::parse(&t))).transpose()?,
    };
    let report = evaluate(&cand, &refs, &res)?;
    let acc = match &a.ground_truth {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| Error::io(p, e))?;
            Some(accuracy_on(&read_ground_truth(BufReader::new(f))?, &cand))
        }
        None => None,
    };
    let text = match a.format {
        OutFormat::Text => {
            let mut t = report.to_text();
            if let Some(acc) = acc {
                t.push_str(&format!("ambiguous-token accuracy: {acc:.4}\n"));
            }
            t
        }
        OutFormat::Jsonl => {
            let mut t = report.to_jsonl();
            if let Some(acc) = acc {
                t.push_str(&format!("{{\"record\":\"ambiguous_accuracy\",\"value\":{acc}}}\n"));
            }
            t
        }
    };
    write_out(a.output.as_deref(), &text)
}

fn gen(a: GenArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        seed: a.seed,
        n_docs: a.docs,
        doc_len: a.doc_len,
        m_alternatives: a.alternatives,
        filler_vocab: a.filler,
        max_distance: a.max_distance,
        min_sentence_len: a.min_len,
        max_sentence_len: a.max_len,
    };
    let (docs, truth) = gen_synthetic(&cfg)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let (src, tgt) = split_sides(&docs);
    let base = a.out_dir.join(&a.prefix);
    let path = |ext: &str| PathBuf::from(format!("{}.{ext}", base.display()));
    fs::write(path("src"), corpus_text(&src)).map_err(|e| Error::io(path("src"), e))?;
    fs::write(path("tgt"), corpus_text(&tgt)).map_err(|e| Error::io(path("tgt"), e))?;
    let mut buf = Vec::new();
    write_ground_truth(&mut buf, &truth).expect("writing to memory");
    fs::write(path("truth.tsv"), buf).map_err(|e| Error::io(path("truth.tsv"), e))?;
    eprintln!("wrote {} documents to {}.{{src,tgt,truth.tsv}}", docs.len(), base.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let f = fs::File::open(&a.trace).map_err(|e| Error::io(&a.trace, e))?;
    let records = read_traces(BufReader::new(f))?;
    let corpus = load_mono(&a.corpus, &a.marker)?;
    let format = match a.format {
        ReportKind::Text => ReportFormat::Text,
        ReportKind::Svg => ReportFormat::Svg,
    };
    let out = render_attention_report(&records, &corpus, format, a.per_head)?;
    fs::write(&a.out, out).map_err(|e| Error::io(&a.out, e))
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    if a.ks.is_empty() || a.ks.contains(&0) {
        return Err(Error::Config("--ks needs positive context sizes".into()));
    }
    let train = load_corpus(&a.src, &a.tgt, &a.marker)?;
    let test = load_corpus(&a.test_src, &a.test_tgt, &a.marker)?;
    let dev = match (&a.dev_src, &a.dev_tgt) {
        (Some(s), Some(t)) => load_corpus(s, t, &a.marker)?,
        _ => Vec::new(),
    };
    let truth = match &a.ground_truth {
        Some(p) => read_ground_truth(BufReader::new(fs::File::open(p).map_err(|e| Error::io(p, e))?))?,
        None => Vec::new(),
    };
    let data = Dataset::new(train, dev, test, truth, &cfg.model)?;
    let exp = cfg.experiment(a.beam);
    let rows = sweep_k(&exp, &data, &a.ks, &mut hanmt::train::Silent)?;
    write_out(a.output.as_deref(), &sweep_table(&rows))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Translate(a) => translate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::GenSynthetic(a) => gen(a),
        Command::Inspect(a) => inspect(a),
        Command::SweepK(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // unreadable inputs count as usage errors
            if matches!(e, Error::Io { .. }) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
