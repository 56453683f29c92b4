//! Binary container shared by ensemble and field dumps.
//!
//! Layout: a 40-byte header (`b"VOLX"`, `u32` version, then `u64` path
//! count, step count `M`, state dimension `n` and seed, all little-endian),
//! followed by a payload of little-endian `f64` values. Field dumps organise
//! the payload in tagged sections: a 4-byte tag, four `u64` extents and the
//! values.

use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 4] = b"VOLX";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub n_paths: u64,
    pub steps: u64,
    pub n: u64,
    pub seed: u64,
}

impl Header {
    pub fn new(n_paths: usize, steps: usize, n: usize, seed: u64) -> Self {
        Self { version: VERSION, n_paths: n_paths as u64, steps: steps as u64, n: n as u64, seed }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..16].copy_from_slice(&self.n_paths.to_le_bytes());
        b[16..24].copy_from_slice(&self.steps.to_le_bytes());
        b[24..32].copy_from_slice(&self.n.to_le_bytes());
        b[32..40].copy_from_slice(&self.seed.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; HEADER_LEN]) -> Result<Self> {
        if &b[0..4] != MAGIC {
            return Err(Error::Io("not a VOLX container (bad magic)".into()));
        }
        let u64_at = |k: usize| u64::from_le_bytes(b[k..k + 8].try_into().unwrap());
        let version = u32::from_le_bytes(b[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Io(format!("unsupported container version {version}")));
        }
        Ok(Self { version, n_paths: u64_at(8), steps: u64_at(16), n: u64_at(24), seed: u64_at(32) })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut b = [0u8; HEADER_LEN];
        r.read_exact(&mut b)?;
        Self::from_bytes(&b)
    }
}

pub fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// A tagged block of values with up to four extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub extents: [u64; 4],
    pub values: Vec<f64>,
}

impl Section {
    /// `tag` is three ASCII characters such as `"U__"`.
    pub fn new(tag: &str, extents: [usize; 4], values: Vec<f64>) -> Self {
        let mut t = [0u8; 4];
        t[..tag.len().min(4)].copy_from_slice(&tag.as_bytes()[..tag.len().min(4)]);
        let extents = extents.map(|e| e as u64);
        debug_assert_eq!(extents.iter().product::<u64>() as usize, values.len());
        Self { tag: t, extents, values }
    }

    pub fn tag_str(&self) -> String {
        String::from_utf8_lossy(&self.tag).trim_end_matches('\0').to_string()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.tag)?;
        for e in self.extents {
            w.write_all(&e.to_le_bytes())?;
        }
        write_f64s(w, &self.values)
    }

    /// Reads the next section, or `None` at a clean end of input.
    pub fn read<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut tag = [0u8; 4];
        match r.read_exact(&mut tag) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let mut extents = [0u64; 4];
        for e in extents.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *e = u64::from_le_bytes(b);
        }
        let count = extents.iter().product::<u64>() as usize;
        let values = read_f64s(r, count)?;
        Ok(Some(Self { tag, extents, values }))
    }
}
