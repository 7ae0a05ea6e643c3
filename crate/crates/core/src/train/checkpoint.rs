//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "AGAT" | version u32 | header_len u32 | header (TOML, UTF-8)
//! | records... | crc32 of everything after the magic
//! record = name_len u32 | name | rank u32 | dims u64 × rank | values f64 × numel
//! ```
//!
//! Records hold the parameters in canonical order followed by the Adam
//! moments `adam.m.<name>` and `adam.v.<name>`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ModelConfig, Params};

const MAGIC: &[u8; 4] = b"AGAT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    state: StateHeader,
}

/// Integers are stored as strings: TOML integers are signed 64-bit.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    step: String,
    epoch: String,
    rng_seed: String,
    rng_stream: String,
    rng_word_pos: String,
}

fn bad(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.into(),
        msg: msg.into(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn parse<T: std::str::FromStr>(field: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| bad(field, format!("cannot parse `{s}`")))
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(field, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32("record name")? as usize;
        let name = std::str::from_utf8(self.take(len, "record name")?)
            .map_err(|_| bad("record name", "not UTF-8"))?
            .to_string();
        let rank = self.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64(&name)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= self.bytes.len() / 8)
            .ok_or_else(|| bad(&name, format!("implausible shape {shape:?}")))?;
        let raw = self.take(8 * numel, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| bad(&name, e.to_string()))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let rng = &self.state.rng;
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            state: StateHeader {
                step: self.state.step.to_string(),
                epoch: self.state.epoch.to_string(),
                rng_seed: hex(&rng.get_seed()),
                rng_stream: rng.get_stream().to_string(),
                rng_word_pos: rng.get_word_pos().to_string(),
            },
        };
        let text = toml::to_string(&header).map_err(|e| bad("header", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let named = self.state.params.named();
        for (name, t) in &named {
            put_tensor(&mut out, name, t);
        }
        for (prefix, moments) in [("adam.m.", &self.state.m), ("adam.v.", &self.state.v)] {
            for ((name, _), t) in named.iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        let crc = crc32fast::hash(&out[4..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses a checkpoint and checks its tensors against the config it
    /// carries.
    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        Self::decode_for(bytes, None)
    }

    /// Like [`Checkpoint::decode`], but tensors must also match `expected`.
    pub fn decode_for(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("magic", "not an AGAT checkpoint"));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: 4,
        };
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(bad("version", format!("unsupported version {version}")));
        }
        if crc32fast::hash(&bytes[4..body_end]) != stored {
            return Err(bad("crc32", "checksum mismatch"));
        }
        let len = r.u32("header")? as usize;
        let text = std::str::from_utf8(r.take(len, "header")?).map_err(|_| bad("header", "not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| bad("header", e.message().to_string()))?;
        header
            .model
            .validate()
            .map_err(|e| bad("header.model", e.to_string()))?;

        let config = expected.unwrap_or(&header.model);
        let table = Params::shape_table(config);
        let mut tensors = Vec::with_capacity(3 * table.len());
        for prefix in ["", "adam.m.", "adam.v."] {
            for (name, shape) in &table {
                let want = format!("{prefix}{name}");
                if r.pos == r.bytes.len() {
                    return Err(bad(&want, "missing tensor record"));
                }
                let (found, t) = r.tensor()?;
                if found != want {
                    return Err(bad(&want, format!("found record `{found}` instead")));
                }
                if t.shape() != shape.as_slice() {
                    return Err(bad(&want, format!("expected shape {shape:?}, found {:?}", t.shape())));
                }
                tensors.push(t);
            }
        }
        if r.pos != r.bytes.len() {
            return Err(bad("records", format!("{} trailing bytes", r.bytes.len() - r.pos)));
        }
        let v = tensors.split_off(2 * table.len());
        let m = tensors.split_off(table.len());
        let params = Params::from_tensors(config, tensors).expect("shapes checked above");

        let s = &header.state;
        let seed = unhex(&s.rng_seed).ok_or_else(|| bad("state.rng_seed", "expected 64 hex digits"))?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(parse("state.rng_stream", &s.rng_stream)?);
        rng.set_word_pos(parse("state.rng_word_pos", &s.rng_word_pos)?);
        Ok(Checkpoint {
            model: config.clone(),
            train: header.train,
            state: TrainState {
                params,
                m,
                v,
                step: parse("state.step", &s.step)?,
                epoch: parse("state.epoch", &s.epoch)?,
                rng,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
        Self::decode_for(&std::fs::read(path)?, Some(expected))
    }
}
