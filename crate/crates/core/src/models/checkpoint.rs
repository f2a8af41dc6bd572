//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PGCK" u16 version
//! u8 kind  u32 input_size  u32 scales  u32 base  u32 classes  u32 in_channels  u8 dense  u64 seed
//! u32 record_count
//! record*: u16 name_len, name (utf-8), u8 dtype, u8 rank, u32 dims[rank], data
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ModelKind};
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"PGCK";
const MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint version {0} (this build reads version {CHECKPOINT_VERSION})")]
    Version(u16),
    #[error("checkpoint does not match model topology: {0}")]
    Topology(String),
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, CheckpointError> {
    Err(CheckpointError::Malformed(msg.into()))
}

/// One named tensor, stored in its on-disk element type.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Raw little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl Record {
    pub fn from_tensor<T: Element>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for v in t.data() {
            v.write_le(&mut bytes);
        }
        Record {
            name: name.to_string(),
            dtype: T::DTYPE,
            dims: t.dims().to_vec(),
            bytes,
        }
    }

    /// Decodes the payload, converting between element types if needed.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>, CheckpointError> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect(),
        };
        Tensor::new(self.dims.clone(), data).map_err(|e| CheckpointError::Malformed(format!("record '{}': {e}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub records: Vec<Record>,
}

fn u32_of(v: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(v).or_else(|_| malformed(format!("{what} {v} does not fit in u32")))
}

impl Checkpoint {
    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        for (v, what) in [
            (c.input_size, "input size"),
            (c.scales, "scale count"),
            (c.base_channels, "base channels"),
            (c.classes, "class count"),
            (c.in_channels, "input channels"),
        ] {
            out.extend_from_slice(&u32_of(v, what)?.to_le_bytes());
        }
        out.push(u8::from(c.dense));
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&u32_of(self.records.len(), "record count")?.to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            let len = u16::try_from(name.len()).or_else(|_| malformed(format!("record name '{}' too long", r.name)))?;
            if r.dims.len() > MAX_RANK {
                return malformed(format!("record '{}' has rank {}", r.name, r.dims.len()));
            }
            let numel: usize = r.dims.iter().product();
            if numel * r.dtype.size() != r.bytes.len() {
                return malformed(format!("record '{}' payload does not match its shape", r.name));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(r.dtype.tag());
            out.push(r.dims.len() as u8);
            for &d in &r.dims {
                out.extend_from_slice(&u32_of(d, "extent")?.to_le_bytes());
            }
            out.extend_from_slice(&r.bytes);
        }
        Ok(out)
    }

    /// Parses a checkpoint. Never panics on arbitrary input.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return malformed("bad magic (expected PGCK)");
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let tag = r.u8()?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| CheckpointError::Malformed(format!("unknown model kind {tag}")))?;
        let input_size = r.u32()? as usize;
        let scales = r.u32()? as usize;
        let base_channels = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let in_channels = r.u32()? as usize;
        let dense = match r.u8()? {
            0 => false,
            1 => true,
            v => return malformed(format!("dense flag must be 0 or 1, got {v}")),
        };
        let seed = r.u64()?;
        let config = ModelConfig {
            input_size,
            scales,
            base_channels,
            classes,
            dense,
            in_channels,
            seed,
        };
        let count = r.u32()? as usize;
        let mut records = Vec::new();
        for i in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .or_else(|_| malformed(format!("record {i} name is not utf-8")))?
                .to_string();
            if records.iter().any(|x: &Record| x.name == name) {
                return malformed(format!("duplicate record '{name}'"));
            }
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::Malformed(format!("record '{name}' has unknown dtype {tag}")))?;
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return malformed(format!("record '{name}' has rank {rank}"));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = r.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| CheckpointError::Malformed(format!("record '{name}' extent overflows")))?;
                dims.push(d);
            }
            let size = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| CheckpointError::Malformed(format!("record '{name}' size overflows")))?;
            if size > r.remaining() {
                return malformed(format!(
                    "record '{name}' needs {size} bytes, {} remain",
                    r.remaining()
                ));
            }
            let bytes = r.take(size)?.to_vec();
            records.push(Record { name, dtype, dims, bytes });
        }
        if r.remaining() != 0 {
            return malformed(format!("{} trailing bytes", r.remaining()));
        }
        Ok(Checkpoint { kind, config, records })
    }

    /// Writes atomically: a sibling temp file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.encode()?;
        crate::io::write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return malformed(format!("truncated at byte {} (wanted {n} more)", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
