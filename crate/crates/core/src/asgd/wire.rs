//! Framed byte protocol for the socket transport.
//!
//! Frame: 4-byte little-endian length (counting the type byte plus the
//! payload), 1-byte message type, then the payload. Types: 0 fetch-request
//! (empty payload), 1 snapshot, 2 gradient. Snapshot and gradient payloads:
//! version or step stamp as 8-byte little-endian unsigned, a 4-byte block
//! count, then per block a 4-byte name length, the name bytes, 4-byte rows
//! and cols, and the row-major 32-bit little-endian floats.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const MSG_FETCH: u8 = 0;
pub const MSG_SNAPSHOT: u8 = 1;
pub const MSG_GRADIENT: u8 = 2;

/// A decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Fetch,
    Snapshot {
        version: u64,
        blocks: Vec<(String, Tensor<f32>)>,
    },
    Gradient {
        step_stamp: u64,
        blocks: Vec<(String, Tensor<f32>)>,
    },
}

fn encode_blocks(out: &mut Vec<u8>, blocks: &[(String, &Tensor<f32>)]) {
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, m) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for &v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn frame(kind: u8, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + payload.len());
    out.extend_from_slice(&(1 + payload.len() as u32).to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&payload);
    out
}

pub fn encode_fetch() -> Vec<u8> {
    frame(MSG_FETCH, Vec::new())
}

pub fn encode_snapshot(version: u64, params: &ModelParams<f32>) -> Vec<u8> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&version.to_le_bytes());
    encode_blocks(&mut payload, &params.named_matrices());
    frame(MSG_SNAPSHOT, payload)
}

pub fn encode_gradient(step_stamp: u64, grads: &ModelParams<f32>) -> Vec<u8> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&step_stamp.to_le_bytes());
    encode_blocks(&mut payload, &grads.named_matrices());
    frame(MSG_GRADIENT, payload)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Protocol(format!(
                "frame truncated at byte {} while reading {what}",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn decode_blocks(cursor: &mut Cursor) -> Result<Vec<(String, Tensor<f32>)>> {
    let count = cursor.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cursor.u32("name length")? as usize;
        let name = String::from_utf8(cursor.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Protocol("block name is not utf-8".to_string()))?;
        let rows = cursor.u32("rows")? as usize;
        let cols = cursor.u32("cols")? as usize;
        let raw = cursor.take(rows * cols * 4, "block data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blocks.push((name, Tensor::new(rows, cols, data)?));
    }
    Ok(blocks)
}

/// Decodes the body of one frame (type byte plus payload, without the
/// length prefix).
pub fn decode_body(body: &[u8]) -> Result<WireMessage> {
    let Some((&kind, payload)) = body.split_first() else {
        return Err(Error::Protocol("empty frame".to_string()));
    };
    let mut cursor = Cursor {
        bytes: payload,
        pos: 0,
    };
    let message = match kind {
        MSG_FETCH => WireMessage::Fetch,
        MSG_SNAPSHOT => {
            let version = cursor.u64("version")?;
            let blocks = decode_blocks(&mut cursor)?;
            WireMessage::Snapshot { version, blocks }
        }
        MSG_GRADIENT => {
            let step_stamp = cursor.u64("step stamp")?;
            let blocks = decode_blocks(&mut cursor)?;
            WireMessage::Gradient { step_stamp, blocks }
        }
        other => {
            return Err(Error::Protocol(format!("unknown message type {other}")));
        }
    };
    if cursor.pos != payload.len() {
        return Err(Error::Protocol(format!(
            "{} trailing bytes after payload",
            payload.len() - cursor.pos
        )));
    }
    Ok(message)
}

/// Reads one length-prefixed frame; Ok(None) on a clean end of stream.
pub fn read_frame(reader: &mut impl Read) -> Result<Option<WireMessage>> {
    let mut len_bytes = [0u8; 4];
    match reader.read_exact(&mut len_bytes) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len_bytes) as usize;
    if len == 0 {
        return Err(Error::Protocol("zero-length frame".to_string()));
    }
    let mut body = vec![0u8; len];
    reader
        .read_exact(&mut body)
        .map_err(|e| Error::Protocol(format!("truncated frame: {e}")))?;
    Ok(Some(decode_body(&body)?))
}

pub fn write_frame(writer: &mut impl Write, encoded: &[u8]) -> Result<()> {
    writer.write_all(encoded)?;
    writer.flush()?;
    Ok(())
}

/// Rebuilds a parameter collection from wire blocks using a structural
/// template; names and shapes must match the template exactly.
pub fn params_from_blocks(
    template: &ModelParams<f32>,
    blocks: &[(String, Tensor<f32>)],
) -> Result<ModelParams<f32>> {
    let mut out = template.clone();
    let mut targets = out.named_matrices_mut();
    if targets.len() != blocks.len() {
        return Err(Error::Protocol(format!(
            "expected {} blocks, got {}",
            targets.len(),
            blocks.len()
        )));
    }
    for ((name, target), (got_name, got)) in targets.iter_mut().zip(blocks.iter()) {
        if name != got_name {
            return Err(Error::Protocol(format!(
                "block '{got_name}' does not match expected '{name}'"
            )));
        }
        if target.shape() != got.shape() {
            return Err(Error::Protocol(format!(
                "block '{name}' is {}x{}, expected {}x{}",
                got.rows(),
                got.cols(),
                target.rows(),
                target.cols()
            )));
        }
        target.data_mut().copy_from_slice(got.data());
    }
    drop(targets);
    Ok(out)
}
