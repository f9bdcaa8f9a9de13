//! Binary spectrum files and small file helpers.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::oracle::SpatialSpectrum;

pub const SPECTRUM_MAGIC: &[u8; 4] = b"WSPC";
pub const SPECTRUM_HEADER_LEN: usize = 16;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| Error::corrupt(path, "file is not valid UTF-8"))
}

/// Writes `bytes`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `WSPC`, height, width, reserved (all u32 LE), then row-major f32 LE.
pub fn encode_spectrum(s: &SpatialSpectrum) -> Vec<u8> {
    let mut out = Vec::with_capacity(SPECTRUM_HEADER_LEN + 4 * s.values.len());
    out.extend_from_slice(SPECTRUM_MAGIC);
    out.write_u32::<LittleEndian>(s.h as u32).unwrap();
    out.write_u32::<LittleEndian>(s.w as u32).unwrap();
    out.write_u32::<LittleEndian>(0).unwrap();
    for &v in &s.values {
        out.write_f32::<LittleEndian>(v as f32).unwrap();
    }
    out
}

pub fn decode_spectrum(bytes: &[u8], origin: &Path) -> Result<SpatialSpectrum> {
    let bad = |m: &str| Error::corrupt(origin, m);
    if bytes.len() < SPECTRUM_HEADER_LEN || &bytes[..4] != SPECTRUM_MAGIC {
        return Err(bad("missing spectrum header"));
    }
    let mut c = Cursor::new(&bytes[4..]);
    let h = c.read_u32::<LittleEndian>().unwrap() as usize;
    let w = c.read_u32::<LittleEndian>().unwrap() as usize;
    let _reserved = c.read_u32::<LittleEndian>().unwrap();
    let n = h.checked_mul(w).ok_or_else(|| bad("spectrum dimensions overflow"))?;
    if bytes.len() != SPECTRUM_HEADER_LEN + 4 * n {
        return Err(bad("spectrum payload length does not match its header"));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(c.read_f32::<LittleEndian>().unwrap() as f64);
    }
    let mut rest = Vec::new();
    c.read_to_end(&mut rest).unwrap();
    debug_assert!(rest.is_empty());
    Ok(SpatialSpectrum { h, w, values })
}

pub fn write_spectrum(path: &Path, s: &SpatialSpectrum) -> Result<()> {
    write_file(path, &encode_spectrum(s))
}

pub fn read_spectrum(path: &Path) -> Result<SpatialSpectrum> {
    decode_spectrum(&read_file(path)?, path)
}
