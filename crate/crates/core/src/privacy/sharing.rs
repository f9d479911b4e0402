use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{PrivacyError, RingVec};
use crate::par::Exec;
use crate::rng::{derive_key, draw};

const SHARE_CHUNK: usize = 4096;

/// One additive share of a fixed-point encoded vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SecretShare {
    pub owner_id: u64,
    pub for_round: u64,
    pub share_index: u32,
    #[serde(serialize_with = "ser_ring", deserialize_with = "de_ring")]
    pub values: RingVec,
}

/// `u32` element count followed by `u64` elements, all little-endian.
pub fn encode_ring_bytes(ring: &RingVec) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + ring.len() * 8);
    out.extend_from_slice(&(ring.len() as u32).to_le_bytes());
    for v in ring.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_ring_bytes(bytes: &[u8]) -> Result<RingVec, PrivacyError> {
    let count = bytes
        .get(..4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| PrivacyError::MalformedShare("missing length prefix".into()))?;
    let body = &bytes[4..];
    if body.len() != count * 8 {
        return Err(PrivacyError::MalformedShare(format!(
            "length prefix says {count} elements, body holds {} bytes",
            body.len()
        )));
    }
    Ok(RingVec(
        body.chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    ))
}

fn ser_ring<S: Serializer>(ring: &RingVec, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&B64.encode(encode_ring_bytes(ring)))
}

fn de_ring<'de, D: Deserializer<'de>>(d: D) -> Result<RingVec, D::Error> {
    let text = String::deserialize(d)?;
    let bytes = B64.decode(text.as_bytes()).map_err(serde::de::Error::custom)?;
    decode_ring_bytes(&bytes).map_err(serde::de::Error::custom)
}

/// Splits `secret` into `parties` additive shares (n-out-of-n).
///
/// Shares `0..n-1` are uniform ring elements drawn from the stream keyed on
/// `(rng_seed, share index)`; the last share is `secret - sum(others)`.
pub fn share_split(
    secret: &RingVec,
    parties: usize,
    owner_id: u64,
    for_round: u64,
    rng_seed: u64,
) -> Result<Vec<SecretShare>, PrivacyError> {
    share_split_with(Exec::default(), secret, parties, owner_id, for_round, rng_seed)
}

pub fn share_split_with(
    exec: Exec,
    secret: &RingVec,
    parties: usize,
    owner_id: u64,
    for_round: u64,
    rng_seed: u64,
) -> Result<Vec<SecretShare>, PrivacyError> {
    if parties == 0 {
        return Err(PrivacyError::NoParties);
    }
    let len = secret.len();
    let mut random: Vec<RingVec> = (0..parties - 1)
        .map(|_| RingVec(vec![0; len]))
        .collect();
    exec.for_each_mut(&mut random, |p, share| {
        let key = derive_key(rng_seed, p as u64);
        for (i, v) in share.0.iter_mut().enumerate() {
            *v = draw(key, i as u64);
        }
    });
    let mut last = secret.clone();
    exec.for_each_chunk_mut(&mut last.0, SHARE_CHUNK, |c, chunk| {
        let base = c * SHARE_CHUNK;
        for (i, v) in chunk.iter_mut().enumerate() {
            for r in &random {
                *v = v.wrapping_sub(r.0[base + i]);
            }
        }
    });
    random.push(last);
    Ok(random
        .into_iter()
        .enumerate()
        .map(|(i, values)| SecretShare {
            owner_id,
            for_round,
            share_index: i as u32,
            values,
        })
        .collect())
}

/// Coordinatewise modular sum.
pub fn share_combine<'a, I>(shares: I) -> Result<RingVec, PrivacyError>
where
    I: IntoIterator<Item = &'a RingVec>,
{
    let mut iter = shares.into_iter();
    let mut acc = iter.next().ok_or(PrivacyError::NoShares)?.clone();
    for s in iter {
        if s.len() != acc.len() {
            return Err(PrivacyError::LengthMismatch {
                expected: acc.len(),
                actual: s.len(),
            });
        }
        acc.wrapping_add_assign(s);
    }
    Ok(acc)
}
