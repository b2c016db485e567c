//! Model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "UNPPCKPT"              8-byte magic
//! version: u32            currently 1
//! header_len: u32
//! header: UTF-8 text      model config lines, then one line per tensor:
//!                         `param <name> <d0>x<d1>x... <offset> <len>`
//! payload_len: u64
//! payload                 f32 values; offsets and lengths count values
//! crc32(payload): u32
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unetrpp_tensor::Element;

use super::config::{key_values, model_to_text, set_model_key};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::nn::Module;

pub const MAGIC: &[u8; 8] = b"UNPPCKPT";
pub const VERSION: u32 = 1;
/// Caps header allocation for untrusted input.
const MAX_HEADER_BYTES: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub entries: Vec<CheckpointEntry>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Snapshot of every parameter, in registration order.
    pub fn from_model<T: Element>(model: &SegModel<T>) -> Self {
        let entries = model
            .params()
            .into_iter()
            .map(|p| CheckpointEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self { config: model.config.clone(), entries }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = model_to_text(&self.config);
        let mut payload = Vec::new();
        let mut offset = 0usize;
        for e in &self.entries {
            let dims = e.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            header.push_str(&format!("param {} {dims} {offset} {}\n", e.name, e.values.len()));
            offset += e.values.len();
            payload.extend(e.values.iter().flat_map(|v| v.to_le_bytes()));
        }
        let mut out = Vec::with_capacity(payload.len() + header.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((header.len() as u32).to_le_bytes());
        out.extend(header.as_bytes());
        out.extend((payload.len() as u64).to_le_bytes());
        out.extend(&payload);
        out.extend(crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = r.u32("header length")?;
        if header_len > MAX_HEADER_BYTES {
            return Err(bad(format!("header length {header_len} too large")));
        }
        let header =
            std::str::from_utf8(r.take(header_len as usize, "header")?).map_err(|_| bad("header is not UTF-8"))?;
        let payload_len = r.u64("payload length")?;
        let payload_len = usize::try_from(payload_len).map_err(|_| bad("payload length overflows"))?;
        if payload_len % 4 != 0 {
            return Err(bad(format!("payload length {payload_len} not a multiple of 4")));
        }
        let payload = r.take(payload_len, "payload")?;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let values = payload.len() / 4;

        let mut config = ModelConfig::default();
        let mut spans = Vec::new();
        let mut entries = Vec::new();
        let config_text: String =
            header.lines().filter(|l| !l.starts_with("param ")).map(|l| format!("{l}\n")).collect();
        for (line, k, v) in key_values(&config_text)? {
            if !set_model_key(&mut config, line, &k, &v)? {
                return Err(bad(format!("unknown header key `{k}`")));
            }
        }
        for line in header.lines().filter(|l| l.starts_with("param ")) {
            let fields: Vec<&str> = line.split(' ').collect();
            let [_, name, dims, offset, len] = fields.as_slice() else {
                return Err(bad(format!("malformed entry `{line}`")));
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number `{s}` in `{line}`")));
            let shape = dims.split('x').map(num).collect::<Result<Vec<_>>>()?;
            let (offset, len) = (num(offset)?, num(len)?);
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if count != Some(len) {
                return Err(bad(format!("`{name}`: shape {shape:?} does not hold {len} values")));
            }
            let end = offset.checked_add(len).filter(|&e| e <= values);
            let end = end.ok_or_else(|| bad(format!("`{name}`: span {offset}+{len} outside payload of {values}")))?;
            spans.push((offset, end, name.to_string()));
            let raw = &payload[offset * 4..end * 4];
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push(CheckpointEntry { name: name.to_string(), shape, values });
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(format!("entries `{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        let mut names: Vec<_> = entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(bad(format!("duplicate entry `{}`", w[0])));
        }
        Ok(Self { config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Builds a model of the stored configuration holding the stored
    /// weights. Every parameter must be present with a matching shape.
    pub fn to_model(&self) -> Result<SegModel<f32>> {
        let mut model = SegModel::new(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        self.apply(&mut model)?;
        Ok(model)
    }

    pub fn apply(&self, model: &mut SegModel<f32>) -> Result<()> {
        if model.config != self.config {
            return Err(Error::Shape("checkpoint configuration differs from the model".into()));
        }
        let by_name: std::collections::HashMap<&str, &CheckpointEntry> =
            self.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut result = Ok(());
        let mut used = 0;
        model.visit_params_mut(&mut |p| {
            if result.is_err() {
                return;
            }
            result = match by_name.get(p.name.as_str()) {
                None => Err(bad(format!("missing parameter `{}`", p.name))),
                Some(e) if e.shape != p.tensor.shape() => {
                    Err(Error::Shape(format!("`{}`: stored {:?}, model {:?}", p.name, e.shape, p.tensor.shape())))
                }
                Some(e) => {
                    used += 1;
                    p.set_data(e.values.clone())
                }
            };
        });
        result?;
        if used != self.entries.len() {
            return Err(bad(format!("{} stored entries do not belong to the model", self.entries.len() - used)));
        }
        Ok(())
    }
}
