//! `PCN1` dense array files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  b"PCN1"
//! u32    height
//! u32    width
//! u32    channels
//! f32    height * width * channels values, row-major, channel fastest
//! ```

use std::fs;
use std::path::Path;

use crate::error::{io_err, PcanError, Result};

pub const MAGIC: &[u8; 4] = b"PCN1";

#[derive(Debug, Clone, PartialEq)]
pub struct Array3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Array3 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err("missing PCN1 magic".into());
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (height, width, channels) = (dim(0), dim(1), dim(2));
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or("dimension overflow")?;
        if bytes.len() != 16 + n * 4 {
            return Err(format!("expected {} payload bytes, found {}", n * 4, bytes.len() - 16));
        }
        let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { height, width, channels, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes).map_err(|reason| PcanError::ArrayFormat { path: path.to_path_buf(), reason })
    }
}
