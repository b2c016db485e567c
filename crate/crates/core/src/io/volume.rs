//! Volume files: a textual header plus a raw little-endian payload stored
//! next to it.
//!
//! ```text
//! extents = 16, 16, 16
//! channels = 1
//! value_type = f32
//! byte_order = little
//! data_file = image.raw
//! ```
//!
//! The payload is channels-first, row-major, 4 bytes per value.

use std::fs;
use std::path::Path;

use unetrpp_tensor::Tensor;

use super::config::key_values;
use crate::error::{Error, Result};
use crate::metrics::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueType {
    F32,
    I32,
}

impl ValueType {
    fn name(self) -> &'static str {
        match self {
            ValueType::F32 => "f32",
            ValueType::I32 => "i32",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeHeader {
    pub extents: [usize; 3],
    pub channels: usize,
    pub value_type: ValueType,
    /// Payload path, relative to the header's directory.
    pub data_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::F32(v) => v.len(),
            VolumeData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value_type(&self) -> ValueType {
        match self {
            VolumeData::F32(_) => ValueType::F32,
            VolumeData::I32(_) => ValueType::I32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    pub channels: usize,
    pub data: VolumeData,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("volume", detail)
}

impl VolumeHeader {
    pub fn num_values(&self) -> Option<usize> {
        self.extents.iter().try_fold(self.channels, |acc, &e| acc.checked_mul(e))
    }

    pub fn payload_bytes(&self) -> Option<usize> {
        self.num_values()?.checked_mul(4)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut extents, mut channels, mut value_type, mut order, mut data_file) = (None, None, None, None, None);
        for (line, k, v) in key_values(text)? {
            match k.as_str() {
                "extents" => {
                    let parts: Vec<_> = v.split(',').map(|p| p.trim().parse::<usize>()).collect();
                    match parts.as_slice() {
                        [Ok(h), Ok(w), Ok(d)] => extents = Some([*h, *w, *d]),
                        _ => return Err(bad(format!("line {line}: bad extents `{v}`"))),
                    }
                }
                "channels" => {
                    channels = Some(v.parse::<usize>().map_err(|_| bad(format!("line {line}: bad channels `{v}`")))?)
                }
                "value_type" => {
                    value_type = Some(match v.as_str() {
                        "f32" => ValueType::F32,
                        "i32" => ValueType::I32,
                        _ => return Err(bad(format!("line {line}: unsupported value_type `{v}`"))),
                    })
                }
                "byte_order" => {
                    if v != "little" {
                        return Err(bad(format!("line {line}: unsupported byte_order `{v}`")));
                    }
                    order = Some(());
                }
                "data_file" => data_file = Some(v),
                _ => return Err(bad(format!("line {line}: unknown key `{k}`"))),
            }
        }
        let header = VolumeHeader {
            extents: extents.ok_or_else(|| bad("missing `extents`"))?,
            channels: channels.ok_or_else(|| bad("missing `channels`"))?,
            value_type: value_type.ok_or_else(|| bad("missing `value_type`"))?,
            data_file: data_file.ok_or_else(|| bad("missing `data_file`"))?,
        };
        order.ok_or_else(|| bad("missing `byte_order`"))?;
        if header.channels == 0 || header.extents.contains(&0) {
            return Err(bad("extents and channels must be positive"));
        }
        if header.payload_bytes().is_none() {
            return Err(bad("volume size overflows"));
        }
        if header.data_file.is_empty() || header.data_file.contains(['/', '\\']) || header.data_file == ".." {
            return Err(bad(format!("data_file `{}` must be a plain file name", header.data_file)));
        }
        Ok(header)
    }

    pub fn to_text(&self) -> String {
        let [h, w, d] = self.extents;
        format!(
            "extents = {h}, {w}, {d}\nchannels = {}\nvalue_type = {}\nbyte_order = little\ndata_file = {}\n",
            self.channels,
            self.value_type.name(),
            self.data_file
        )
    }
}

/// Decodes a payload against its header.
pub fn decode_payload(header: &VolumeHeader, bytes: &[u8]) -> Result<VolumeData> {
    let expect = header.payload_bytes().ok_or_else(|| bad("volume size overflows"))?;
    if bytes.len() != expect {
        return Err(bad(format!("payload is {} bytes, header implies {expect}", bytes.len())));
    }
    let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    Ok(match header.value_type {
        ValueType::F32 => VolumeData::F32(words.map(f32::from_le_bytes).collect()),
        ValueType::I32 => VolumeData::I32(words.map(i32::from_le_bytes).collect()),
    })
}

pub fn encode_payload(data: &VolumeData) -> Vec<u8> {
    match data {
        VolumeData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        VolumeData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

impl Volume {
    pub fn new(extents: [usize; 3], channels: usize, data: VolumeData) -> Result<Self> {
        let n = channels * extents.iter().product::<usize>();
        if n == 0 || data.len() != n {
            return Err(bad(format!("{channels}×{extents:?} volume needs {n} values, got {}", data.len())));
        }
        Ok(Self { extents, channels, data })
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [c, h, w, d] => Self::new([h, w, d], c, VolumeData::F32(t.to_vec())),
            _ => Err(bad(format!("expected C×H×W×D tensor, got {:?}", t.shape()))),
        }
    }

    pub fn from_labels(l: &LabelMap) -> Result<Self> {
        let data = l
            .data
            .iter()
            .map(|&c| i32::try_from(c).map_err(|_| bad(format!("label {c} exceeds i32"))))
            .collect::<Result<_>>()?;
        Self::new(l.extents, 1, VolumeData::I32(data))
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        let [h, w, d] = self.extents;
        let data = match &self.data {
            VolumeData::F32(v) => v.clone(),
            VolumeData::I32(v) => v.iter().map(|&x| x as f32).collect(),
        };
        Ok(Tensor::new(data, &[self.channels, h, w, d])?)
    }

    /// Single-channel integer volume as a label map.
    pub fn to_labels(&self) -> Result<LabelMap> {
        let VolumeData::I32(v) = &self.data else {
            return Err(bad("label volumes must hold i32 values"));
        };
        if self.channels != 1 {
            return Err(bad(format!("label volumes have one channel, got {}", self.channels)));
        }
        let data = v
            .iter()
            .map(|&x| u32::try_from(x).map_err(|_| bad(format!("negative label {x}"))))
            .collect::<Result<_>>()?;
        LabelMap::new(self.extents, data)
    }

    /// Writes `header_path` and a payload file beside it (same stem,
    /// `.raw` extension).
    pub fn save(&self, header_path: &Path) -> Result<()> {
        let data_path = header_path.with_extension("raw");
        let data_file = data_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| bad(format!("cannot derive payload name from {}", header_path.display())))?
            .to_string();
        let header = VolumeHeader {
            extents: self.extents,
            channels: self.channels,
            value_type: self.data.value_type(),
            data_file,
        };
        fs::write(&data_path, encode_payload(&self.data))?;
        fs::write(header_path, header.to_text())?;
        Ok(())
    }

    pub fn load(header_path: &Path) -> Result<Self> {
        let header = VolumeHeader::parse(&fs::read_to_string(header_path)?)?;
        let dir = header_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let bytes = fs::read(dir.join(&header.data_file))?;
        let data = decode_payload(&header, &bytes)?;
        Self::new(header.extents, header.channels, data)
    }
}
