//! Flat parameter vectors and the `DSC1` checkpoint encoding.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "DSC1"
//! version   u32      1
//! layers    u32      number of manifest entries
//! per layer:
//!   name_len u16, name (UTF-8), ndims u32, dims u64 * ndims
//! count     u64      number of values
//! values    f64 * count
//! ```

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("manifest describes {expected} values but {actual} were given")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("parameter manifests differ")]
    ManifestMismatch,
    #[error("non-finite parameter at index {index}")]
    NonFinite { index: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub dims: Vec<usize>,
}

impl LayerShape {
    pub fn new(name: impl Into<String>, dims: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered layer list; values are laid out layer after layer, row-major.
pub type Manifest = Vec<LayerShape>;

pub fn manifest_len(manifest: &[LayerShape]) -> usize {
    manifest.iter().map(LayerShape::len).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    manifest: Manifest,
}

impl ParamVector {
    /// Builds a vector, checking the manifest length and that every value is finite.
    pub fn new(manifest: Manifest, values: Vec<f64>) -> Result<Self, ParamError> {
        let expected = manifest_len(&manifest);
        if expected != values.len() {
            return Err(ParamError::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        let v = Self { values, manifest };
        v.ensure_finite()?;
        Ok(v)
    }

    pub fn zeros(manifest: Manifest) -> Self {
        let n = manifest_len(&manifest);
        Self {
            values: vec![0.0; n],
            manifest,
        }
    }

    /// Same manifest, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, ParamError> {
        Self::new(self.manifest.clone(), values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn manifest(&self) -> &[LayerShape] {
        &self.manifest
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        let mut offset = 0;
        for l in &self.manifest {
            let n = l.len();
            if l.name == name {
                return Some(&self.values[offset..offset + n]);
            }
            offset += n;
        }
        None
    }

    pub fn ensure_finite(&self) -> Result<(), ParamError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(ParamError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        self.manifest == other.manifest
    }

    fn check_shape(&self, other: &ParamVector) -> Result<(), ParamError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ParamError::ManifestMismatch)
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self - other`, coordinatewise.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector, ParamError> {
        self.check_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        self.with_values(values)
    }

    /// `self + other`, coordinatewise.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector, ParamError> {
        self.check_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        self.with_values(values)
    }

    pub fn scaled(&self, factor: f64) -> Result<ParamVector, ParamError> {
        self.with_values(self.values.iter().map(|v| v * factor).collect())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.values.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for layer in &self.manifest {
            out.extend_from_slice(&(layer.name.len() as u16).to_le_bytes());
            out.extend_from_slice(layer.name.as_bytes());
            out.extend_from_slice(&(layer.dims.len() as u32).to_le_bytes());
            for d in &layer.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<ParamVector, ParamError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(ParamError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ParamError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let layers = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(layers.min(1024));
        for _ in 0..layers {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ParamError::Checkpoint("layer name is not UTF-8".into()))?
                .to_string();
            let ndims = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndims.min(16));
            for _ in 0..ndims {
                dims.push(r.u64()? as usize);
            }
            manifest.push(LayerShape { name, dims });
        }
        let count = r.u64()? as usize;
        if count.checked_mul(8).is_none_or(|b| b > bytes.len() - r.pos) {
            return Err(ParamError::Checkpoint("truncated values".into()));
        }
        let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        if r.pos != bytes.len() {
            return Err(ParamError::Checkpoint("trailing bytes".into()));
        }
        ParamVector::new(manifest, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ParamError> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| ParamError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamVector, ParamError> {
        let bytes = std::fs::read(path).map_err(|e| ParamError::Io(e.to_string()))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ParamError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ParamError::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ParamError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ParamError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ParamError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ParamError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

// On the wire a ParamVector is the base64 of its checkpoint bytes.
impl Serialize for ParamVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(self.to_checkpoint_bytes()))
    }
}

impl<'de> Deserialize<'de> for ParamVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = B64.decode(text.as_bytes()).map_err(serde::de::Error::custom)?;
        ParamVector::from_checkpoint_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}
