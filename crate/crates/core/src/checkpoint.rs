//! Binary checkpoint format.
//!
//! ```text
//! magic "HANMTCK\0" | u32 version
//! u32 header length | TOML header (stage, step, model config, vocabularies)
//! u32 parameter count | per parameter: u32 name length, name, u32 rank, u32 dims.., f32 values
//! u8 optimizer flag | [u64 step, per parameter f32 m values then f32 v values]
//! end marker "HANMTEND"
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::ModelConfig;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"HANMTCK\0";
pub const END: &[u8; 8] = b"HANMTEND";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: u8,
    pub step: u64,
    pub config: ModelConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: u8,
    step: u64,
    model: ModelConfig,
    vocab: VocabHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabHeader {
    source: Vec<String>,
    target: Vec<String>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{what} too large")))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: impl IntoIterator<Item = f32>) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, stage: u8, step: u64, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary, optimizer: Option<&AdamState>) -> Self {
        Self {
            stage,
            step,
            config: model.config.clone(),
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            params: model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage,
            step: self.step,
            model: self.config.clone(),
            vocab: VocabHeader { source: self.src_vocab.entries().to_vec(), target: self.tgt_vocab.entries().to_vec() },
        };
        let header = toml::to_string(&header).map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, t.data().iter().map(|&x| x as f32));
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                    return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
                }
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for (i, (_, t)) in self.params.iter().enumerate() {
                    if opt.m[i].len() != t.numel() || opt.v[i].len() != t.numel() {
                        return Err(Error::Checkpoint("optimizer moment size mismatch".into()));
                    }
                    put_f32s(&mut out, opt.m[i].iter().copied());
                    put_f32s(&mut out, opt.v[i].iter().copied());
                }
            }
        }
        out.extend_from_slice(END);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let hlen = r.u32("header length")? as usize;
        let htext = std::str::from_utf8(r.take(hlen, "header")?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header: Header = toml::from_str(htext).map_err(|e| Error::Checkpoint(format!("corrupted header: {e}")))?;
        header.model.validate().map_err(|e| Error::Checkpoint(format!("header model config: {e}")))?;
        let src_vocab = Vocabulary::from_tokens(header.vocab.source)?;
        let tgt_vocab = Vocabulary::from_tokens(header.vocab.target)?;
        let n = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for i in 0..n {
            let nlen = r.u32("parameter name length")? as usize;
            let name = String::from_utf8(r.take(nlen, "parameter name")?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("parameter {i} name is not UTF-8")))?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("parameter {name}: implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name}: size overflow")))?;
            let data = r.f32s(numel, &name)?.into_iter().map(f64::from).collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        let optimizer = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for (name, t) in &params {
                    m.push(r.f32s(t.numel(), name)?);
                    v.push(r.f32s(t.numel(), name)?);
                }
                Some(AdamState { step, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.take(8, "end marker")? != END {
            return Err(Error::Checkpoint("missing end marker".into()));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after end marker".into()));
        }
        Ok(Self { stage: header.stage, step: header.step, config: header.model, src_vocab, tgt_vocab, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// The stored parameters as a standalone store (names and values only).
    pub fn param_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.params {
            store.insert(name.clone(), t.clone()).expect("names are unique in a parsed checkpoint");
        }
        store
    }

    /// Rebuilds the exact model that was saved.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), 0)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, configuration expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model.store.id(name).ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            model.store.set(id, t.clone()).map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        }
        if let Some(opt) = &self.optimizer {
            opt.check(&model.store)?;
        }
        Ok(model)
    }
}
