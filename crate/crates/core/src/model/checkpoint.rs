//! Binary checkpoint format.
//!
//! A UTF-8 header of `key=value` lines (values are JSON) terminated by a line
//! `end`, followed by every parameter in canonical order as
//! `u32 name length, name bytes, u32 rows, u32 cols, rows*cols f32`, all
//! little-endian.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Real};
use crate::surgery::LangTable;
use crate::vocab::{TokenId, Vocabulary};

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &str = "POLYGLOT-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub pretrained: Vec<String>,
    /// Language tables in creation order with their global ids.
    pub tables: Vec<(String, Vec<TokenId>)>,
    pub st_frozen: bool,
    pub arrays: Vec<(String, Matrix<f32>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>) -> Self {
        let mut tables: Vec<(String, Vec<TokenId>, usize)> = model
            .embedding
            .tables()
            .map(|(name, t)| (name.clone(), t.ids.clone(), t.param.0))
            .collect();
        tables.sort_by_key(|t| t.2);
        Self {
            config: model.config,
            vocab: model.vocab.clone(),
            pretrained: model.pretrained.clone(),
            tables: tables.into_iter().map(|(n, ids, _)| (n, ids)).collect(),
            st_frozen: model.embedding.st_frozen,
            arrays: model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.cast()))
                .collect(),
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::new(self.config, self.vocab.clone(), 0)?;
        model.pretrained = self.pretrained.clone();
        model.embedding.st_frozen = self.st_frozen;
        let expected = model.params.len() + self.tables.len();
        if self.arrays.len() != expected {
            return Err(bad(format!(
                "expected {expected} arrays, found {}",
                self.arrays.len()
            )));
        }
        for (name, value) in &self.arrays {
            if let Some(lang) = name.strip_prefix("emb.lang.") {
                let ids = self
                    .tables
                    .iter()
                    .find(|t| t.0 == lang)
                    .map(|t| t.1.clone())
                    .ok_or_else(|| bad(format!("no id map for table `{name}`")))?;
                if value.shape() != (self.config.model_dim, ids.len()) {
                    return Err(bad(format!("table `{name}` has shape {:?}", value.shape())));
                }
                let param = model.params.add(name.clone(), value.cast())?;
                model.embedding.insert_table(lang, LangTable { param, ids });
            } else {
                let id = model.params.id(name).map_err(|_| bad(format!("unexpected array `{name}`")))?;
                if model.params.value(id).shape() != value.shape() {
                    return Err(bad(format!(
                        "array `{name}` has shape {:?}, expected {:?}",
                        value.shape(),
                        model.params.value(id).shape()
                    )));
                }
                model.params.replace(id, value.cast());
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(CHECKPOINT_MAGIC);
        header.push('\n');
        header.push_str(&format!("version={CHECKPOINT_VERSION}\n"));
        if let Value::Object(cfg) = serde_json::to_value(self.config).expect("config serializes") {
            for (k, v) in cfg {
                header.push_str(&format!("model.{k}={v}\n"));
            }
        }
        header.push_str(&format!("vocab={}\n", json(&self.vocab.to_text())));
        header.push_str(&format!("pretrained={}\n", json(&self.pretrained)));
        header.push_str(&format!("tables={}\n", json(&self.tables)));
        header.push_str(&format!("st_frozen={}\n", self.st_frozen));
        header.push_str(&format!("arrays={}\n", self.arrays.len()));
        header.push_str("end\n");

        let mut out = header.into_bytes();
        for (name, m) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            *pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not UTF-8"))
        };
        if next_line(&mut pos)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut fields = Map::new();
        let mut config = Map::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad header line `{line}`")))?;
            let v: Value = serde_json::from_str(v)?;
            match k.strip_prefix("model.") {
                Some(field) => config.insert(field.to_string(), v),
                None => fields.insert(k.to_string(), v),
            };
        }
        let mut take = |k: &str| fields.remove(k).ok_or_else(|| bad(format!("missing header key `{k}`")));
        let version: u32 = serde_json::from_value(take("version")?)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let vocab_text: String = serde_json::from_value(take("vocab")?)?;
        let pretrained: Vec<String> = serde_json::from_value(take("pretrained")?)?;
        let tables: Vec<(String, Vec<TokenId>)> = serde_json::from_value(take("tables")?)?;
        let st_frozen: bool = serde_json::from_value(take("st_frozen")?)?;
        let count: usize = serde_json::from_value(take("arrays")?)?;
        let config: ModelConfig = serde_json::from_value(Value::Object(config))?;

        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated array"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let n = read_u32(&mut pos)? as usize;
            let name = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("array name is not UTF-8"))?;
            pos += n;
            let rows = read_u32(&mut pos)? as usize;
            let cols = read_u32(&mut pos)? as usize;
            let len = rows * cols;
            let raw = bytes.get(pos..pos + 4 * len).ok_or_else(|| bad(format!("truncated array `{name}`")))?;
            pos += 4 * len;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config,
            vocab: Vocabulary::from_text(&vocab_text)?,
            pretrained,
            tables,
            st_frozen,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn json<V: serde::Serialize + ?Sized>(v: &V) -> String {
    serde_json::to_string(v).expect("header values serialize")
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    Checkpoint::load(path)?.to_model()
}

impl<T: Real> Model<T> {
    /// Hex SHA-256 over the f32 little-endian bytes of every parameter whose
    /// name satisfies `select`, in canonical order.
    pub fn hash_params(&self, mut select: impl FnMut(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| select(&p.name)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update((v.f64() as f32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encoder_hash(&self) -> String {
        self.hash_params(|n| n.starts_with("enc."))
    }

    pub fn base_table_hash(&self) -> String {
        self.hash_params(|n| n == crate::surgery::BASE_NAME)
    }
}
