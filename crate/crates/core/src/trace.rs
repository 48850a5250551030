//! Binary trace format for recorded noise-prediction trajectories.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TAOT"                      4 bytes magic
//! version: u32                currently 1
//! header_len: u32
//! header: [u8; header_len]    compact JSON of TraceMeta, fields in declaration order
//! frames, t descending; within one t, stream code ascending:
//!     t: u32
//!     stream: u8              0 = cond, 1 = uncond, 2 = guided
//!     flags: u8               bit 0 = latent payload follows
//!     eps: [f32; prod(shape)]
//!     latent: [f32; prod(shape)]   only if flags & 1
//! crc32: u32                  IEEE CRC-32 of every preceding byte
//! ```
//!
//! A trace covering `T` steps holds exactly one frame per `(t, stream)` for
//! `t = T..=1` and every stream in the header bitmask.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Stream;

pub const MAGIC: &[u8; 4] = b"TAOT";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_LATENT: u8 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("not a trace file (bad magic)")]
    BadMagic,
    #[error("unsupported trace format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("trace truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed trace header: {0}")]
    Header(String),
    #[error("invalid trace: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type TraceResult<T> = std::result::Result<T, TraceError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub model_id: String,
    #[serde(rename = "T")]
    pub steps: u32,
    pub shape: Vec<usize>,
    /// Bitmask of recorded streams (`1 << Stream::code()`).
    pub streams: u8,
    pub dtype: String,
    pub endianness: String,
    pub schedule_kind: String,
    pub seed: u64,
}

impl TraceMeta {
    pub fn new(model_id: impl Into<String>, steps: u32, shape: Vec<usize>, streams: &[Stream]) -> Self {
        Self {
            model_id: model_id.into(),
            steps,
            shape,
            streams: streams.iter().fold(0, |m, s| m | s.bit()),
            dtype: "f32".into(),
            endianness: "little".into(),
            schedule_kind: String::new(),
            seed: 0,
        }
    }

    pub fn streams(&self) -> Vec<Stream> {
        Stream::ALL
            .into_iter()
            .filter(|s| self.streams & s.bit() != 0)
            .collect()
    }

    pub fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: u32,
    pub stream: Stream,
    pub eps: Vec<f32>,
    /// Sampler input `x_t` at this step, if captured.
    pub latent: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(meta: TraceMeta) -> Self {
        Self {
            meta,
            records: Vec::new(),
        }
    }

    pub fn record(&self, t: u32, stream: Stream) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.t == t && r.stream == stream)
    }

    pub fn has_latents(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.latent.is_some())
    }

    /// Checks ordering, payload sizes and completeness.
    pub fn validate(&self) -> TraceResult<()> {
        let meta = &self.meta;
        if meta.dtype != "f32" || meta.endianness != "little" {
            return Err(TraceError::Validation(format!(
                "unsupported storage {}/{}",
                meta.dtype, meta.endianness
            )));
        }
        if meta.steps == 0 {
            return Err(TraceError::Validation("T must be positive".into()));
        }
        if meta.streams == 0 || meta.streams > 0b111 {
            return Err(TraceError::Validation(format!("bad stream mask {:#05b}", meta.streams)));
        }
        let numel = meta
            .numel()
            .ok_or_else(|| TraceError::Validation("shape overflows".into()))?;

        let mut prev: Option<(u32, u8)> = None;
        for r in &self.records {
            if r.t == 0 || r.t > meta.steps {
                return Err(TraceError::Validation(format!(
                    "record t = {} outside [1, {}]",
                    r.t, meta.steps
                )));
            }
            if meta.streams & r.stream.bit() == 0 {
                return Err(TraceError::Validation(format!(
                    "record t = {} has stream {} not in header",
                    r.t, r.stream
                )));
            }
            let key = (r.t, r.stream.code());
            if let Some((pt, ps)) = prev {
                if !(key.0 < pt || (key.0 == pt && key.1 > ps)) {
                    return Err(TraceError::Validation(format!(
                        "records out of order or duplicated at t = {}, stream {}",
                        r.t, r.stream
                    )));
                }
            }
            prev = Some(key);
            if r.eps.len() != numel || r.latent.as_ref().is_some_and(|l| l.len() != numel) {
                return Err(TraceError::Validation(format!(
                    "record t = {} payload length does not match shape {:?}",
                    r.t, meta.shape
                )));
            }
            let finite = r.eps.iter().chain(r.latent.iter().flatten()).all(|v| v.is_finite());
            if !finite {
                return Err(TraceError::Validation(format!(
                    "record t = {} has non-finite values",
                    r.t
                )));
            }
        }

        let mut missing = Vec::new();
        for t in (1..=meta.steps).rev() {
            for s in meta.streams() {
                if self.record(t, s).is_none() {
                    missing.push(format!("{t}/{s}"));
                }
            }
        }
        if !missing.is_empty() {
            return Err(TraceError::Validation(format!(
                "header declares T = {} but records are missing for t/stream: {}",
                meta.steps,
                missing.join(", ")
            )));
        }
        Ok(())
    }

    /// Serialises the trace into its binary form.
    pub fn to_bytes(&self) -> TraceResult<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&self.meta).map_err(|e| TraceError::Header(e.to_string()))?;
        let header_len = u32::try_from(header.len()).map_err(|_| TraceError::Header("header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for r in &self.records {
            out.extend_from_slice(&r.t.to_le_bytes());
            out.push(r.stream.code());
            out.push(if r.latent.is_some() { FLAG_LATENT } else { 0 });
            for v in r.eps.iter().chain(r.latent.iter().flatten()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> TraceResult<Trace> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(TraceError::BadMagic);
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(TraceError::Version { found: version });
        }
        if bytes.len() < 16 {
            return Err(TraceError::Truncated {
                offset: bytes.len(),
                needed: 16 - bytes.len(),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
        let computed = crc32fast::hash(body);
        let parsed = parse_body(body);
        if stored != computed {
            // a body that cannot even be framed was cut short rather than corrupted
            if let Err(e @ TraceError::Truncated { .. }) = parsed {
                return Err(e);
            }
            return Err(TraceError::Checksum { stored, computed });
        }
        let trace = parsed?;
        trace.validate()?;
        Ok(trace)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> TraceResult<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(TraceError::Truncated {
                offset: self.pos,
                needed: n - available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> TraceResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> TraceResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32s(&mut self, n: usize) -> TraceResult<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| TraceError::Validation("payload size overflows".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn parse_body(body: &[u8]) -> TraceResult<Trace> {
    let mut cur = Cursor { bytes: body, pos: 8 };
    let header_len = cur.u32()? as usize;
    let header = cur.take(header_len)?;
    let meta: TraceMeta = serde_json::from_slice(header).map_err(|e| TraceError::Header(e.to_string()))?;
    let numel = meta
        .numel()
        .ok_or_else(|| TraceError::Header("shape overflows".into()))?;
    let mut records = Vec::new();
    while !cur.is_empty() {
        let t = cur.u32()?;
        let code = cur.u8()?;
        let stream =
            Stream::from_code(code).ok_or_else(|| TraceError::Validation(format!("unknown stream code {code}")))?;
        let flags = cur.u8()?;
        if flags & !FLAG_LATENT != 0 {
            return Err(TraceError::Validation(format!("unknown frame flags {flags:#04x}")));
        }
        let eps = cur.f32s(numel)?;
        let latent = if flags & FLAG_LATENT != 0 {
            Some(cur.f32s(numel)?)
        } else {
            None
        };
        records.push(TraceRecord { t, stream, eps, latent });
    }
    Ok(Trace { meta, records })
}

pub fn write_trace(trace: &Trace, mut sink: impl Write) -> TraceResult<u64> {
    let bytes = trace.to_bytes()?;
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(bytes.len() as u64)
}

pub fn read_trace(mut source: impl Read) -> TraceResult<Trace> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    Trace::from_bytes(&bytes)
}

pub fn write_trace_file(trace: &Trace, path: impl AsRef<Path>) -> TraceResult<u64> {
    let bytes = trace.to_bytes()?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_trace_file(path: impl AsRef<Path>) -> TraceResult<Trace> {
    Trace::from_bytes(&std::fs::read(path)?)
}
