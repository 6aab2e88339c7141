//! Document-level neural machine translation with hierarchical attention over
//! previous sentences, built on a small reverse-mode autograd engine.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod grad_check;
pub mod han;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod report;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod vocab;

pub use autograd::{Graph, Var};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use corpus::{load_corpus, plan_batches, BatchPlan, Document, MonoDocument};
pub use decode::{beam_search, translate_document, DecodeOptions, Hypothesis};
pub use error::{Error, Result};
pub use han::{han_apply, AttentionTrace, ContextCache, HanBlock, Site};
pub use metrics::{bleu, EvalReport};
pub use model::Model;
pub use param::{ParamId, ParamStore};
pub use report::{render_attention_report, TraceRecord};
pub use synthetic::{gen_synthetic, SyntheticConfig};
pub use tensor::Tensor;
pub use optim::lr_schedule;
pub use train::{train_stage1, train_stage2, TrainConfig};
pub use transformer::{HanMode, ModelConfig, Transformer};
pub use vocab::Vocabulary;
