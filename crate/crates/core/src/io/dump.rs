//! `ADMP` attention dumps.
//!
//! Little-endian throughout: magic `ADMP`, then `u32` version, step count,
//! height, width and token count, then every stack's values in `(h, w, L)`
//! order as `f32`.

use std::path::Path;

use crate::attention::AttentionStack;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ADMP";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
/// Per-location sum-to-one tolerance after 32-bit storage.
pub const LOAD_TOLERANCE: f64 = 1e-6;

pub fn encode_dump(stacks: &[AttentionStack]) -> Result<Vec<u8>> {
    let first = stacks.first().ok_or_else(|| Error::Parameter("dump needs at least one stack".into()))?;
    let (h, w, l) = (first.height(), first.width(), first.token_count());
    for (s, st) in stacks.iter().enumerate() {
        if (st.height(), st.width(), st.token_count()) != (h, w, l) {
            return Err(Error::Shape(format!(
                "stack {s} has shape {}x{}x{}, expected {h}x{w}x{l}",
                st.height(),
                st.width(),
                st.token_count()
            )));
        }
    }
    let header = [VERSION as usize, stacks.len(), h, w, l];
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * stacks.len() * h * w * l);
    out.extend_from_slice(MAGIC);
    for v in header {
        let v = u32::try_from(v).map_err(|_| Error::InvalidInput(format!("header field {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for st in stacks {
        for &v in st.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn header_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_dump(bytes: &[u8]) -> Result<Vec<AttentionStack>> {
    if bytes.len() < 4 {
        return Err(Error::Corruption(format!("dump is {} bytes, shorter than its magic", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad dump magic {:?}", &bytes[..4]) });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption(format!("dump header truncated at {} of {HEADER_LEN} bytes", bytes.len())));
    }
    let version = header_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported dump version {version}") });
    }
    let steps = header_u32(bytes, 8) as usize;
    let (h, w, l) = (header_u32(bytes, 12) as usize, header_u32(bytes, 16) as usize, header_u32(bytes, 20) as usize);
    for (field, value, offset) in [("step count", steps, 8), ("height", h, 12), ("width", w, 16), ("token count", l, 20)] {
        if value == 0 {
            return Err(Error::Format { offset, message: format!("{field} is zero") });
        }
    }
    let per_stack = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(l))
        .ok_or_else(|| Error::Format { offset: 12, message: "stack dimensions overflow".into() })?;
    let expected = steps
        .checked_mul(per_stack)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format { offset: 8, message: "payload size overflows".into() })?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Corruption(format!(
            "payload truncated: {} of {expected} bytes for {steps} stacks of {h}x{w}x{l}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format {
            offset: (HEADER_LEN + expected) as u64,
            message: format!("{} trailing bytes after the payload", payload.len() - expected),
        });
    }
    let mut stacks = Vec::with_capacity(steps);
    for (step, chunk) in payload.chunks_exact(4 * per_stack).enumerate() {
        let values: Vec<f64> = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        let stack = AttentionStack::from_raw(h, w, l, values)
            .map_err(|e| Error::InvalidInput(format!("step {step}: {e}")))?;
        if let Some((i, j, sum)) = stack.first_simplex_violation(LOAD_TOLERANCE) {
            return Err(Error::InvalidInput(format!(
                "step {step}, location ({i}, {j}): attention sums to {sum}, outside 1 +/- {LOAD_TOLERANCE}"
            )));
        }
        stacks.push(stack);
    }
    Ok(stacks)
}

pub fn write_dump(path: &Path, stacks: &[AttentionStack]) -> Result<()> {
    std::fs::write(path, encode_dump(stacks)?)?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<AttentionStack>> {
    decode_dump(&std::fs::read(path)?)
}
