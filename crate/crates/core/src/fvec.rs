//! FVEC v1: binary container for one dense `n × d` float matrix.
//!
//! ```text
//! offset  size      field
//! 0       4         magic  b"BSDF"
//! 4       4         u32 LE version (= 1)
//! 8       4         u32 LE n (frames / rows)
//! 12      4         u32 LE d (dims / columns)
//! 16      4·n·d     f32 LE values, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"BSDF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Dense row-major matrix of one sound's features (`frames × dims`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub sound_id: String,
    frames: usize,
    dims: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(sound_id: impl Into<String>, frames: usize, dims: usize, values: Vec<f32>) -> Result<Self> {
        let sound_id = sound_id.into();
        if frames == 0 || dims == 0 {
            return Err(Error::Empty("feature matrix must have at least one frame and one dim"));
        }
        if values.len() != frames * dims {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: frames * dims,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of `{sound_id}`")));
        }
        Ok(FeatureMatrix {
            sound_id,
            frames,
            dims,
            values,
        })
    }

    /// A single-frame (clip-level) matrix.
    pub fn from_vector(sound_id: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        let dims = values.len();
        FeatureMatrix::new(sound_id, 1, dims, values)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dims)
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn read_file(path: impl AsRef<Path>, sound_id: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = BufReader::new(File::open(path)?);
        let (frames, dims, values) = read_block(&mut reader)?;
        let mut probe = [0u8; 1];
        if reader.read(&mut probe)? != 0 {
            return Err(Error::Format(format!("{}: trailing bytes after FVEC payload", path.display())));
        }
        FeatureMatrix::new(sound_id, frames, dims, values)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = BufWriter::new(File::create(path)?);
        write_block(&mut writer, self.frames, self.dims, &self.values)?;
        writer.flush()?;
        Ok(())
    }
}

/// Writes one FVEC block.
pub fn write_block<W: Write>(w: &mut W, n: usize, d: usize, values: &[f32]) -> Result<()> {
    if values.len() != n * d {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: n * d,
        });
    }
    let n32 = u32::try_from(n).map_err(|_| Error::Format("row count exceeds u32".into()))?;
    let d32 = u32::try_from(d).map_err(|_| Error::Format("dim count exceeds u32".into()))?;
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(&MAGIC);
    header[4..8].copy_from_slice(&VERSION.to_le_bytes());
    header[8..12].copy_from_slice(&n32.to_le_bytes());
    header[12..16].copy_from_slice(&d32.to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads exactly one FVEC block, leaving the reader positioned after it.
pub fn read_block<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f32>)> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated FVEC header: {e}")))?;
    if header[0..4] != MAGIC {
        return Err(Error::Format("bad FVEC magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported FVEC version {version}")));
    }
    let n = word(8) as usize;
    let d = word(12) as usize;
    let count = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format("FVEC shape overflows".into()))?;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated FVEC payload: {e}")))?;
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((n, d, values))
}
