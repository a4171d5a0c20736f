//! Little-endian binary helpers shared by the matrix, model and forest files.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, what)?;
    Ok(b[0])
}

pub fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_f32<R: Read>(r: &mut R, what: &str) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(f32::from_le_bytes(b))
}

pub fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "magic bytes")?;
    if &b != magic {
        return Err(Error::Format(format!(
            "bad magic bytes {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub fn expect_version<R: Read>(r: &mut R, expected: u32) -> Result<()> {
    let found = read_u32(r, "format version")?;
    if found != expected {
        return Err(Error::Version { found, expected });
    }
    Ok(())
}

/// Writes a u32 length prefix followed by the JSON bytes.
pub fn write_json_header<W: Write, T: serde::Serialize>(w: &mut W, header: &T) -> Result<()> {
    let bytes = serde_json::to_vec(header)?;
    write_u32(w, bytes.len() as u32)?;
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_json_header<R: Read, T: serde::de::DeserializeOwned>(r: &mut R) -> Result<T> {
    let len = read_u32(r, "header length")? as usize;
    if len > 64 << 20 {
        return Err(Error::Format(format!("header length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, "json header")?;
    Ok(serde_json::from_slice(&buf)?)
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(bytes))
}

