//! Middlebury `.flo` container: little-endian `f32` magic 202021.25,
//! `i32` width and height, then row-major interleaved `f32` `(u, v)`.

use std::path::Path;

use crate::error::{Error, FloError, Result};
use crate::tensor::Tensor;
use crate::types::Mask;

pub const FLO_MAGIC: f32 = 202021.25;
/// Components above this magnitude mark unknown flow.
pub const UNKNOWN_FLOW_THRESHOLD: f32 = 1e9;
pub const UNKNOWN_FLOW: f32 = 1e10;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    /// Invalid pixels are written as the unknown-flow sentinel.
    pub fn from_tensor(flow: &Tensor, valid: Option<&Mask>) -> Self {
        let (_, h, w) = flow.dims3();
        let mut f = Self::zeros(w, h);
        for i in 0..w * h {
            if valid.is_none_or(|m| m.data()[i]) {
                f.u[i] = flow.channel(0)[i] as f32;
                f.v[i] = flow.channel(1)[i] as f32;
            } else {
                f.u[i] = UNKNOWN_FLOW;
                f.v[i] = UNKNOWN_FLOW;
            }
        }
        f
    }

    /// `[2, h, w]` flow plus validity; unknown pixels become `(0, 0)`, invalid.
    pub fn to_tensor(&self) -> (Tensor, Mask) {
        let n = self.width * self.height;
        let mut t = Tensor::zeros(&[2, self.height, self.width]);
        let mut valid = Mask::new(self.height, self.width);
        for i in 0..n {
            let known = self.u[i].abs() <= UNKNOWN_FLOW_THRESHOLD && self.v[i].abs() <= UNKNOWN_FLOW_THRESHOLD;
            if known {
                t.data_mut()[i] = f64::from(self.u[i]);
                t.data_mut()[n + i] = f64::from(self.v[i]);
            }
            valid.set(i / self.width, i % self.width, known);
        }
        (t, valid)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.u.len());
        out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for (u, v) in self.u.iter().zip(&self.v) {
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FloError> {
        let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().expect("4 bytes") };
        if bytes.len() < 4 {
            return Err(FloError::Truncated {
                expected: 12,
                found: bytes.len(),
            });
        }
        let magic = f32::from_le_bytes(word(0));
        if magic != FLO_MAGIC {
            return Err(FloError::BadMagic(magic));
        }
        if bytes.len() < 12 {
            return Err(FloError::Truncated {
                expected: 12,
                found: bytes.len(),
            });
        }
        let width = i32::from_le_bytes(word(4));
        let height = i32::from_le_bytes(word(8));
        if width <= 0 || height <= 0 {
            return Err(FloError::NonPositiveDimensions { width, height });
        }
        let (w, h) = (width as usize, height as usize);
        let expected = 12 + 8 * w * h;
        if bytes.len() < expected {
            return Err(FloError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let mut field = Self::zeros(w, h);
        for i in 0..w * h {
            field.u[i] = f32::from_le_bytes(word(12 + 8 * i));
            field.v[i] = f32::from_le_bytes(word(16 + 8 * i));
        }
        Ok(field)
    }
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FlowField::from_bytes(&bytes)?)
}

pub fn write_flo(field: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, field.to_bytes()).map_err(|e| Error::io(path, e))
}
