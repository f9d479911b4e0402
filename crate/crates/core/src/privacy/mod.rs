//! Differential-privacy update transforms and additive secret sharing over a
//! fixed-point ring (integers modulo 2^64).

mod dp;
mod fixed_point;
mod sharing;

use thiserror::Error;

pub use dp::{add_noise, add_noise_with, clip_update, privatize, PrivacyConfig};
pub use fixed_point::{decode_fp, encode_fp, FixedPointCodec, RingVec, DEFAULT_SCALE_BITS};
pub use sharing::{
    decode_ring_bytes, encode_ring_bytes, share_combine, share_split, share_split_with,
    SecretShare,
};

use crate::params::ParamError;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy config: {0}")]
    InvalidConfig(String),
    #[error("update norm is not finite")]
    NonFiniteNorm,
    #[error("value {value} is outside the fixed-point range")]
    Overflow { value: f64 },
    #[error("secret sharing needs at least one party")]
    NoParties,
    #[error("no shares to combine")]
    NoShares,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("malformed share encoding: {0}")]
    MalformedShare(String),
    #[error(transparent)]
    Params(#[from] ParamError),
}
