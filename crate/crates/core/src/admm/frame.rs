//! Wire format of one ADMM broadcast. All integers and floats little-endian.
//!
//! ```text
//! offset  size   field
//! 0       4      u32 payload length L (bytes that follow this field)
//! 4       4      magic "ADMB"
//! 8       2      u16 format version (1)
//! 10      2      u16 parameter dimension m
//! 12      8      u64 iteration
//! 20      4      u32 sender index (zero-based)
//! 24      8m     β_i
//! 24+8m   8m     w_i
//! ```
//!
//! `L = 20 + 16m`.

use std::io::{ErrorKind, Read};

use super::transport::Broadcast;
use crate::error::{FleetError, Result};

pub const MAGIC: &[u8; 4] = b"ADMB";
pub const VERSION: u16 = 1;
const FIXED: usize = 20;

pub fn encode(msg: &Broadcast) -> Result<Vec<u8>> {
    let m = msg.beta.len();
    if msg.w.len() != m || m > u16::MAX as usize {
        return Err(FleetError::Protocol("cannot frame a malformed broadcast".into()));
    }
    let payload = FIXED + 16 * m;
    let mut out = Vec::with_capacity(4 + payload);
    out.extend_from_slice(&(payload as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m as u16).to_le_bytes());
    out.extend_from_slice(&msg.iteration.to_le_bytes());
    out.extend_from_slice(&msg.sender.to_le_bytes());
    for v in msg.beta.iter().chain(&msg.w) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_payload(payload: &[u8]) -> Result<Broadcast> {
    let bad = |what: &str| FleetError::Protocol(format!("bad broadcast frame: {what}"));
    if payload.len() < FIXED {
        return Err(bad("short payload"));
    }
    if &payload[0..4] != MAGIC {
        return Err(bad("magic"));
    }
    let version = u16::from_le_bytes([payload[4], payload[5]]);
    if version != VERSION {
        return Err(bad("unsupported version"));
    }
    let m = u16::from_le_bytes([payload[6], payload[7]]) as usize;
    if payload.len() != FIXED + 16 * m {
        return Err(bad("length does not match dimension"));
    }
    let iteration = u64::from_le_bytes(payload[8..16].try_into().expect("8 bytes"));
    let sender = u32::from_le_bytes(payload[16..20].try_into().expect("4 bytes"));
    let floats: Vec<f64> = payload[FIXED..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Broadcast {
        iteration,
        sender,
        beta: floats[..m].to_vec(),
        w: floats[m..].to_vec(),
    })
}

/// Decodes one complete frame, length prefix included.
pub fn decode(frame: &[u8]) -> Result<Broadcast> {
    if frame.len() < 4 {
        return Err(FleetError::Protocol("bad broadcast frame: missing length".into()));
    }
    let len = u32::from_le_bytes(frame[0..4].try_into().expect("4 bytes")) as usize;
    if frame.len() != 4 + len {
        return Err(FleetError::Protocol("bad broadcast frame: length prefix".into()));
    }
    decode_payload(&frame[4..])
}

/// Reads the next frame from a stream; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Broadcast>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > FIXED + 16 * u16::MAX as usize {
        return Err(FleetError::Protocol("bad broadcast frame: oversized".into()));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    decode_payload(&payload).map(Some)
}
