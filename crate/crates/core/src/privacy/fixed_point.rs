use serde::{Deserialize, Serialize};

use super::PrivacyError;
use crate::params::ParamVector;

pub const DEFAULT_SCALE_BITS: u32 = 20;

/// Vector of elements of the ring of integers modulo 2^64.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RingVec(pub Vec<u64>);

impl RingVec {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn wrapping_add_assign(&mut self, other: &RingVec) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = a.wrapping_add(*b);
        }
    }
}

/// Two's-complement fixed point with `scale_bits` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FixedPointCodec {
    scale_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self {
            scale_bits: DEFAULT_SCALE_BITS,
        }
    }
}

impl FixedPointCodec {
    pub fn new(scale_bits: u32) -> Result<Self, PrivacyError> {
        if !(8..=40).contains(&scale_bits) {
            return Err(PrivacyError::InvalidConfig(format!(
                "scaleBits must be in [8, 40], got {scale_bits}"
            )));
        }
        Ok(Self { scale_bits })
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    fn scale(&self) -> f64 {
        (1u64 << self.scale_bits) as f64
    }

    /// Largest magnitude (exclusive) accepted by [`encode_value`](Self::encode_value).
    pub fn range(&self) -> f64 {
        (1u64 << (62 - self.scale_bits)) as f64
    }

    /// Quantization step.
    pub fn resolution(&self) -> f64 {
        1.0 / self.scale()
    }

    pub fn encode_value(&self, v: f64) -> Result<u64, PrivacyError> {
        if !v.is_finite() || v.abs() >= self.range() {
            return Err(PrivacyError::Overflow { value: v });
        }
        Ok((v * self.scale()).round() as i64 as u64)
    }

    pub fn decode_value(&self, r: u64) -> f64 {
        r as i64 as f64 / self.scale()
    }

    pub fn encode(&self, values: &[f64]) -> Result<RingVec, PrivacyError> {
        values
            .iter()
            .map(|&v| self.encode_value(v))
            .collect::<Result<Vec<_>, _>>()
            .map(RingVec)
    }

    pub fn decode(&self, ring: &RingVec) -> Vec<f64> {
        ring.0.iter().map(|&r| self.decode_value(r)).collect()
    }
}

pub fn encode_fp(v: &ParamVector, codec: &FixedPointCodec) -> Result<RingVec, PrivacyError> {
    codec.encode(v.values())
}

/// Decodes into the shape described by `like`.
pub fn decode_fp(
    ring: &RingVec,
    codec: &FixedPointCodec,
    like: &ParamVector,
) -> Result<ParamVector, PrivacyError> {
    if ring.len() != like.len() {
        return Err(PrivacyError::LengthMismatch {
            expected: like.len(),
            actual: ring.len(),
        });
    }
    Ok(like.with_values(codec.decode(ring))?)
}
