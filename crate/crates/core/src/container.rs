//! Binary container shared by checkpoints and dataset files: 4 magic bytes,
//! a `u32` little-endian header length, a UTF-8 JSON header, then a raw
//! payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write<W: Write>(mut w: W, magic: &[u8; 4], header: &[u8], payload: &[u8]) -> Result<()> {
    let len = u32::try_from(header.len()).map_err(|_| Error::invalid("header too large"))?;
    w.write_all(magic)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(header)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Returns `(header, payload)` after checking the magic.
pub(crate) fn read<R: Read>(mut r: R, magic: &[u8; 4]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Truncated { expected: 8, actual: bytes.len() });
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + len {
        return Err(Error::Truncated { expected: 8 + len, actual: bytes.len() });
    }
    let payload = bytes.split_off(8 + len);
    bytes.drain(..8);
    Ok((bytes, payload))
}

pub(crate) fn f32s_to_le(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub(crate) fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}
