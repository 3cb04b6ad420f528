//! Binary feature files: `"EFEA"`, u32 version (1), u32 frames, u32 dim,
//! then `frames × dim` little-endian f32 values, row-major.

use std::path::Path;

use crate::error::{Error, FeatureError, Result};

pub const MAGIC: &[u8; 4] = b"EFEA";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// A `frames × dim` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::Invalid(format!(
                "{} values for {frames} frames of dimension {dim}",
                data.len()
            )));
        }
        Ok(FeatureMatrix { frames, dim, data })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(FeatureError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(FeatureError::Truncated);
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let version = word(4);
        if version != VERSION {
            return Err(FeatureError::BadVersion(version));
        }
        let frames = word(8) as usize;
        let dim = word(12) as usize;
        let want = frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or(FeatureError::Truncated)?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < want {
            return Err(FeatureError::Truncated);
        }
        if payload.len() > want {
            return Err(FeatureError::TrailingBytes);
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(FeatureMatrix { frames, dim, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|kind| Error::Feature {
            path: path.into(),
            kind,
        })
    }
}
