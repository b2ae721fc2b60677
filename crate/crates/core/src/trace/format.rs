//! Binary trace files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header  magic "ESSTRACE" | u16 version | u32 num_layers | u64 context_len
//!         | u32 topk | u64 num_steps | u8 has_prefill_windows
//! step    u16 tokens_accepted, then per layer: u32 count, count indices
//! windows per layer: u32 num_windows, then per window: u32 count, count indices
//! ```
//!
//! Index arrays are delta-encoded: the first value is stored as is, every
//! later value as its difference from the previous one. Version 1 stores each
//! value as a `u32`; version 2 stores them as LEB128 varints.

use std::path::Path;

use thiserror::Error;

use super::{AccessTrace, SetLocation, StepAccess, TraceError};

pub const MAGIC: &[u8; 8] = b"ESSTRACE";
pub const FORMAT_VERSION: u16 = 1;
pub const SUPPORTED_VERSIONS: [u16; 2] = [1, 2];

#[derive(Debug, Error)]
pub enum TraceFormatError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {version} at byte {offset}")]
    UnsupportedVersion { version: u16, offset: usize },
    #[error("truncated file: needed {needed} more bytes at byte {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{at}, layer {layer}: index {index} outside [0, {limit}) at byte {offset}")]
    OutOfRange {
        at: SetLocation,
        layer: usize,
        index: u64,
        limit: u64,
        offset: usize,
    },
    #[error("malformed varint at byte {offset}")]
    BadVarint { offset: usize },
    #[error("{source} (at byte {offset})")]
    Invalid { offset: usize, source: TraceError },
    #[error("{count} trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("trace file I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Serializes a trace after checking its invariants.
pub fn encode_trace(trace: &AccessTrace, version: u16) -> Result<Vec<u8>, TraceFormatError> {
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(TraceFormatError::UnsupportedVersion { version, offset: 8 });
    }
    trace
        .validate()
        .map_err(|source| TraceFormatError::Invalid { offset: 0, source })?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&trace.num_layers.to_le_bytes());
    out.extend_from_slice(&trace.context_len.to_le_bytes());
    out.extend_from_slice(&trace.topk.to_le_bytes());
    out.extend_from_slice(&(trace.steps.len() as u64).to_le_bytes());
    out.push(u8::from(trace.prefill_windows.is_some()));

    for step in &trace.steps {
        out.extend_from_slice(&step.tokens_accepted.to_le_bytes());
        for set in &step.layers {
            put_set(&mut out, set, version);
        }
    }
    if let Some(windows) = &trace.prefill_windows {
        for per_layer in windows {
            out.extend_from_slice(&(per_layer.len() as u32).to_le_bytes());
            for set in per_layer {
                put_set(&mut out, set, version);
            }
        }
    }
    Ok(out)
}

fn put_set(out: &mut Vec<u8>, set: &[u32], version: u16) {
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    let mut prev = 0u32;
    for (i, &v) in set.iter().enumerate() {
        let delta = if i == 0 { v } else { v - prev };
        prev = v;
        match version {
            1 => out.extend_from_slice(&delta.to_le_bytes()),
            _ => put_varint(out, delta),
        }
    }
}

fn put_varint(out: &mut Vec<u8>, mut v: u32) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TraceFormatError> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(TraceFormatError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TraceFormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TraceFormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TraceFormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TraceFormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn varint(&mut self) -> Result<u32, TraceFormatError> {
        let start = self.pos;
        let mut value: u64 = 0;
        for shift in (0..35).step_by(7) {
            let byte = self.u8()?;
            value |= u64::from(byte & 0x7f) << shift;
            if byte & 0x80 == 0 {
                return u32::try_from(value)
                    .map_err(|_| TraceFormatError::BadVarint { offset: start });
            }
        }
        Err(TraceFormatError::BadVarint { offset: start })
    }

    fn set(
        &mut self,
        version: u16,
        at: SetLocation,
        layer: usize,
        limit: u64,
        topk: u32,
    ) -> Result<Vec<u32>, TraceFormatError> {
        let count_offset = self.pos;
        let count = self.u32()? as usize;
        if count > topk as usize {
            return Err(TraceFormatError::Invalid {
                offset: count_offset,
                source: TraceError::TooLarge {
                    at,
                    layer,
                    len: count,
                    topk,
                },
            });
        }
        let mut set = Vec::with_capacity(count);
        let mut prev: u64 = 0;
        for i in 0..count {
            let offset = self.pos;
            let delta = match version {
                1 => self.u32()?,
                _ => self.varint()?,
            };
            if i > 0 && delta == 0 {
                return Err(TraceFormatError::Invalid {
                    offset,
                    source: TraceError::NotSorted {
                        at,
                        layer,
                        position: i,
                    },
                });
            }
            let value = if i == 0 {
                u64::from(delta)
            } else {
                prev + u64::from(delta)
            };
            if value >= limit {
                return Err(TraceFormatError::OutOfRange {
                    at,
                    layer,
                    index: value,
                    limit,
                    offset,
                });
            }
            prev = value;
            set.push(value as u32);
        }
        Ok(set)
    }
}

pub fn decode_trace(bytes: &[u8]) -> Result<AccessTrace, TraceFormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(TraceFormatError::BadMagic { offset: 0 });
    }
    let version_offset = r.pos;
    let version = r.u16()?;
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(TraceFormatError::UnsupportedVersion {
            version,
            offset: version_offset,
        });
    }
    let num_layers = r.u32()?;
    let context_len = r.u64()?;
    let topk = r.u32()?;
    let num_steps = r.u64()?;
    let has_windows = r.u8()? != 0;

    let layers = num_layers as usize;
    let mut steps = Vec::new();
    let mut history = context_len;
    for t in 0..num_steps as usize {
        let tokens_accepted = r.u16()?;
        let mut sets = Vec::with_capacity(layers);
        for l in 0..layers {
            sets.push(r.set(version, SetLocation::Step(t), l, history, topk)?);
        }
        steps.push(StepAccess {
            layers: sets,
            tokens_accepted,
        });
        history += u64::from(tokens_accepted);
    }

    let prefill_windows = if has_windows {
        let mut all = Vec::with_capacity(layers);
        for l in 0..layers {
            let n = r.u32()? as usize;
            let mut per_layer = Vec::with_capacity(n.min(1024));
            for w in 0..n {
                per_layer.push(r.set(version, SetLocation::Window(w), l, context_len, topk)?);
            }
            all.push(per_layer);
        }
        Some(all)
    } else {
        None
    };

    if r.pos != bytes.len() {
        return Err(TraceFormatError::TrailingBytes {
            offset: r.pos,
            count: bytes.len() - r.pos,
        });
    }
    let trace = AccessTrace {
        num_layers,
        context_len,
        topk,
        steps,
        prefill_windows,
    };
    Ok(trace)
}

/// Version stored in an encoded trace's header.
pub fn encoded_version(bytes: &[u8]) -> Option<u16> {
    bytes.get(8..10).map(|b| u16::from_le_bytes([b[0], b[1]]))
}

pub fn write_trace(
    trace: &AccessTrace,
    path: impl AsRef<Path>,
    version: u16,
) -> Result<(), TraceFormatError> {
    let bytes = encode_trace(trace, version)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<AccessTrace, TraceFormatError> {
    let bytes = std::fs::read(path)?;
    decode_trace(&bytes)
}
