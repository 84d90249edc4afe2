//! Raw field dumps: a 32-byte header followed by little-endian `f64` values.
//!
//! Header layout: 8-byte magic `HOMLABF1`, then little-endian `u32`s for the
//! dimension, the node count of each of three axes (unused axes are 1), the
//! boundary-condition code and a reserved zero word.

use std::io::{Read, Write};
use std::path::Path;

use super::grid::{Bc, GridField};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HOMLABF1";

#[derive(Debug, Clone, PartialEq)]
pub struct FieldDump {
    pub dim: usize,
    pub counts: [u32; 3],
    pub bc: Bc,
    pub values: Vec<f64>,
}

pub fn write_field<W: Write>(w: &mut W, field: &GridField) -> Result<()> {
    let g = &field.grid;
    let mut header = Vec::with_capacity(32);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&(g.dim as u32).to_le_bytes());
    for k in 0..3 {
        let c = if k < g.dim { g.nodes_per_axis() as u32 } else { 1 };
        header.extend_from_slice(&c.to_le_bytes());
    }
    header.extend_from_slice(&g.bc.code().to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(field.values.len() * 8);
    for v in &field.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_field<R: Read>(r: &mut R) -> Result<FieldDump> {
    let mut header = [0u8; 32];
    r.read_exact(&mut header)?;
    if &header[..8] != MAGIC {
        return Err(Error::InvalidDump("bad magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(header[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes"));
    let dim = word(0) as usize;
    if !(1..=3).contains(&dim) {
        return Err(Error::InvalidDump(format!("dimension {dim} out of range")));
    }
    let counts = [word(1), word(2), word(3)];
    let bc = Bc::from_code(word(4)).ok_or_else(|| Error::InvalidDump(format!("unknown bc code {}", word(4))))?;
    let total: usize = counts.iter().map(|&c| c as usize).product();
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != total * 8 {
        return Err(Error::InvalidDump(format!(
            "expected {} value bytes, found {}",
            total * 8,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(FieldDump {
        dim,
        counts,
        bc,
        values,
    })
}

pub fn save_field(path: &Path, field: &GridField) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_field(&mut f, field)?;
    f.flush()?;
    Ok(())
}

pub fn load_field(path: &Path) -> Result<FieldDump> {
    read_field(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
