//! Checkpoint files.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "RULEXEC\0"
//! version    u32      1
//! header     u32 length + UTF-8 JSON {"model": ModelConfig, "meta": any}
//! digest     32 bytes SHA-256 of the serialised ModelConfig JSON
//! count      u32      number of tensors
//! tensor     u32 name length, name, u8 trainable, u32 rows, u32 cols,
//!            rows * cols IEEE-754 f64 values, row-major
//! trailer    32 bytes SHA-256 of every preceding byte
//! ```
//!
//! Optimizer moments are stored as tensors named `adam.m.<param>` and
//! `adam.v.<param>`, the step count as the 1x1 tensor `adam.step`.

use std::io::Write;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::model::{Model, ModelConfig};
use super::optim::{Adam, AdamConfig};
use super::params::ParamStore;
use super::tensor::Mat;
use super::ModelError;

pub const MAGIC: &[u8; 8] = b"RULEXEC\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Adam>,
    pub meta: Value,
}

fn config_json(cfg: &ModelConfig) -> String {
    serde_json::to_string(cfg).expect("config serialises")
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::json!({ "model": ck.model.cfg, "meta": ck.meta }).to_string();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&Sha256::digest(config_json(&ck.model.cfg).as_bytes()));
    let mut tensors: Vec<(String, bool, &Mat)> = ck
        .model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.trainable, &p.value))
        .collect();
    let step;
    if let Some(opt) = &ck.optimizer {
        for (p, m) in ck.model.params.iter().zip(&opt.m) {
            tensors.push((format!("adam.m.{}", p.name), false, m));
        }
        for (p, v) in ck.model.params.iter().zip(&opt.v) {
            tensors.push((format!("adam.v.{}", p.name), false, v));
        }
        step = Mat::from_vec(1, 1, vec![opt.step as f64]);
        tensors.push(("adam.step".into(), false, &step));
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, trainable, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(trainable as u8);
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let trailer = Sha256::digest(&out);
    out.extend_from_slice(&trailer);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8], adam: AdamConfig) -> Result<Checkpoint, ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(bad("checksum mismatch (file corrupt or truncated)"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Value = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    let cfg: ModelConfig = serde_json::from_value(header["model"].clone())
        .map_err(|e| ModelError::Checkpoint(format!("model config: {e}")))?;
    if Sha256::digest(config_json(&cfg).as_bytes()).as_slice() != r.take(32)? {
        return Err(bad("config digest mismatch"));
    }
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut moments: Vec<(String, Mat)> = Vec::new();
    let mut step = None;
    for _ in 0..n {
        let nl = r.u32()? as usize;
        let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| bad("tensor name"))?;
        let trainable = r.take(1)?[0] != 0;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Mat::from_vec(rows, cols, data);
        if name == "adam.step" {
            step = Some(m.data[0] as u64);
        } else if name.starts_with("adam.") {
            moments.push((name, m));
        } else {
            params.add(name, m, trainable);
        }
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    let model = Model::from_params(cfg, params)?;
    let optimizer = match step {
        None => None,
        Some(step) => {
            let mut opt = Adam::new(adam, &model.params);
            opt.step = step;
            for (name, m) in moments {
                let (kind, pname) = name["adam.".len()..].split_at(1);
                let id = model
                    .params
                    .id(&pname[1..])
                    .ok_or_else(|| ModelError::Checkpoint(format!("moment for unknown tensor {name}")))?;
                let slot = if kind == "m" { &mut opt.m[id] } else { &mut opt.v[id] };
                if slot.shape() != m.shape() {
                    return Err(ModelError::Checkpoint(format!("moment shape for {name}")));
                }
                *slot = m;
            }
            Some(opt)
        }
    };
    Ok(Checkpoint {
        model,
        optimizer,
        meta: header["meta"].clone(),
    })
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    let bytes = to_bytes(ck);
    let tmp = path.with_extension("tmp");
    let io = |e: std::io::Error| ModelError::Io(format!("{}: {e}", path.display()));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path, adam: AdamConfig) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes, adam)
}

/// Loads a checkpoint and checks that it was trained for `vocab_size` tokens.
pub fn load_for_vocab(path: &Path, vocab_size: usize) -> Result<Checkpoint, ModelError> {
    let ck = load_checkpoint(path, AdamConfig::default())?;
    if ck.model.cfg.vocab_size != vocab_size {
        return Err(ModelError::VocabMismatch {
            expected: vocab_size,
            found: ck.model.cfg.vocab_size,
        });
    }
    Ok(ck)
}
