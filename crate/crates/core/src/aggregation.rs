//! Combining client updates: weighted FedAvg and secure-sum aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::Exec;
use crate::params::{ParamError, ParamVector};
use crate::privacy::{
    decode_fp, share_combine, share_split, FixedPointCodec, PrivacyError, RingVec, SecretShare,
};

pub type ClientId = u64;

const COORD_CHUNK: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("no contributions to aggregate")]
    Empty,
    #[error("contribution from client {client} does not match the model manifest")]
    ManifestMismatch { client: ClientId },
    #[error("contributions mix rounds {first} and {other}")]
    MixedRounds { first: u64, other: u64 },
    #[error("client {client} contributed more than once")]
    DuplicateClient { client: ClientId },
    #[error("client {client} reported a sample count of zero")]
    ZeroSampleCount { client: ClientId },
    #[error("client {client} omitted its sample count, required for weighted secure summation")]
    MissingSampleCount { client: ClientId },
    #[error("share matrix is incomplete: missing share from {owner} to {recipient}")]
    MissingShare { owner: ClientId, recipient: ClientId },
    #[error("share from {owner} to {recipient} has length {actual}, expected {expected}")]
    ShareLength {
        owner: ClientId,
        recipient: ClientId,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Params(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Weighting {
    /// Weight each client by its sample count.
    #[default]
    Samples,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AggregationScheme {
    Mean,
    SecureSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub client_id: ClientId,
    pub round: u64,
    pub payload: ParamVector,
    pub sample_count: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult {
    pub round: u64,
    pub global_update: ParamVector,
    /// Sorted ascending.
    pub participants: Vec<ClientId>,
    pub scheme: AggregationScheme,
    /// Weighting actually applied (may differ from the request, see [`fedavg`]).
    pub weighting: Weighting,
}

fn effective_weighting(requested: Weighting, contribs: &[&Contribution]) -> Result<Weighting, AggregationError> {
    for c in contribs {
        if c.sample_count == Some(0) {
            return Err(AggregationError::ZeroSampleCount { client: c.client_id });
        }
    }
    Ok(match requested {
        Weighting::Samples if contribs.iter().all(|c| c.sample_count.is_some()) => Weighting::Samples,
        _ => Weighting::Uniform,
    })
}

/// Weighted mean `sum_i (n_i / sum n) * update_i`.
///
/// Contributions are ordered by client id before summing, so the result does
/// not depend on arrival order. The mean is accumulated as offsets from the
/// first update, which makes the mean of identical updates exact. Sample-count
/// weighting falls back to uniform when any client omitted its count.
pub fn fedavg(contribs: &[Contribution], weighting: Weighting) -> Result<AggregationResult, AggregationError> {
    fedavg_with(Exec::default(), contribs, weighting)
}

pub fn fedavg_with(
    exec: Exec,
    contribs: &[Contribution],
    weighting: Weighting,
) -> Result<AggregationResult, AggregationError> {
    let mut sorted: Vec<&Contribution> = contribs.iter().collect();
    sorted.sort_by_key(|c| c.client_id);
    let first = *sorted.first().ok_or(AggregationError::Empty)?;
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(AggregationError::DuplicateClient {
                client: pair[1].client_id,
            });
        }
    }
    for c in &sorted {
        if c.round != first.round {
            return Err(AggregationError::MixedRounds {
                first: first.round,
                other: c.round,
            });
        }
        if !c.payload.same_shape(&first.payload) {
            return Err(AggregationError::ManifestMismatch { client: c.client_id });
        }
    }
    let weighting = effective_weighting(weighting, &sorted)?;
    let weights: Vec<f64> = sorted
        .iter()
        .map(|c| match weighting {
            Weighting::Samples => c.sample_count.unwrap() as f64,
            Weighting::Uniform => 1.0,
        })
        .collect();
    let total: f64 = weights.iter().sum();

    let reference = first.payload.values();
    let mut out = reference.to_vec();
    exec.for_each_chunk_mut(&mut out, COORD_CHUNK, |c, chunk| {
        let base = c * COORD_CHUNK;
        for (i, v) in chunk.iter_mut().enumerate() {
            let r = reference[base + i];
            let mut acc = 0.0;
            for (contrib, w) in sorted.iter().zip(&weights).skip(1) {
                acc += w * (contrib.payload.values()[base + i] - r);
            }
            *v = r + acc / total;
        }
    });
    Ok(AggregationResult {
        round: first.round,
        global_update: first.payload.with_values(out)?,
        participants: sorted.iter().map(|c| c.client_id).collect(),
        scheme: AggregationScheme::Mean,
        weighting,
    })
}

/// Weight a client applies to its own update before encoding for secure summation.
pub fn secure_weight(weighting: Weighting, sample_count: Option<u64>, client: ClientId) -> Result<u64, AggregationError> {
    match (weighting, sample_count) {
        (_, Some(0)) => Err(AggregationError::ZeroSampleCount { client }),
        (Weighting::Uniform, _) => Ok(1),
        (Weighting::Samples, Some(n)) => Ok(n),
        (Weighting::Samples, None) => Err(AggregationError::MissingSampleCount { client }),
    }
}

/// Client side of secure summation: encode `weight * update` and split it into
/// one share per party. Share `i` is meant for the `i`-th participant in
/// ascending client-id order.
#[allow(clippy::too_many_arguments)]
pub fn secure_contribution(
    update: &ParamVector,
    sample_count: Option<u64>,
    weighting: Weighting,
    codec: &FixedPointCodec,
    parties: usize,
    owner: ClientId,
    round: u64,
    rng_seed: u64,
) -> Result<Vec<SecretShare>, AggregationError> {
    let w = secure_weight(weighting, sample_count, owner)? as f64;
    let weighted: Vec<f64> = update.values().iter().map(|v| v * w).collect();
    let encoded = codec.encode(&weighted)?;
    Ok(share_split(&encoded, parties, owner, round, rng_seed)?)
}

/// Turns the ring total of weighted updates back into a mean update.
pub fn finish_secure_sum(
    total: &RingVec,
    total_weight: u64,
    codec: &FixedPointCodec,
    like: &ParamVector,
) -> Result<ParamVector, AggregationError> {
    let decoded = decode_fp(total, codec, like)?;
    let weight = total_weight as f64;
    Ok(decoded.with_values(decoded.values().iter().map(|v| v / weight).collect())?)
}

/// Shares indexed by `(owner, recipient)` for one round.
#[derive(Debug, Clone, Default)]
pub struct ShareMatrix {
    round: u64,
    participants: BTreeSet<ClientId>,
    cells: BTreeMap<(ClientId, ClientId), RingVec>,
}

impl ShareMatrix {
    pub fn new(round: u64, participants: impl IntoIterator<Item = ClientId>) -> Self {
        Self {
            round,
            participants: participants.into_iter().collect(),
            cells: BTreeMap::new(),
        }
    }

    pub fn participants(&self) -> Vec<ClientId> {
        self.participants.iter().copied().collect()
    }

    pub fn insert(&mut self, owner: ClientId, recipient: ClientId, share: RingVec) {
        self.cells.insert((owner, recipient), share);
    }

    /// Places an owner's shares: share `i` goes to the `i`-th participant.
    pub fn insert_split(&mut self, owner: ClientId, shares: Vec<SecretShare>) {
        let recipients = self.participants();
        for s in shares {
            if let Some(&r) = recipients.get(s.share_index as usize) {
                self.insert(owner, r, s.values);
            }
        }
    }

    pub fn get(&self, owner: ClientId, recipient: ClientId) -> Option<&RingVec> {
        self.cells.get(&(owner, recipient))
    }

    /// Ring sum of every share addressed to `recipient`.
    pub fn partial_sum(&self, recipient: ClientId) -> Result<RingVec, AggregationError> {
        let column = self
            .participants
            .iter()
            .map(|&owner| {
                self.get(owner, recipient)
                    .ok_or(AggregationError::MissingShare { owner, recipient })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let expected = column.first().map_or(0, |c| c.len());
        for (&owner, c) in self.participants.iter().zip(&column) {
            if c.len() != expected {
                return Err(AggregationError::ShareLength {
                    owner,
                    recipient,
                    expected,
                    actual: c.len(),
                });
            }
        }
        Ok(share_combine(column)?)
    }
}

/// Secure summation over a complete `k x k` share matrix: each recipient sums
/// its column, the partial sums are combined, decoded and divided by the total
/// weight. `counts` holds each participant's sample count.
pub fn secure_aggregate(
    matrix: &ShareMatrix,
    counts: &BTreeMap<ClientId, Option<u64>>,
    weighting: Weighting,
    codec: &FixedPointCodec,
    like: &ParamVector,
) -> Result<AggregationResult, AggregationError> {
    let participants = matrix.participants();
    if participants.is_empty() {
        return Err(AggregationError::Empty);
    }
    let mut total_weight = 0u64;
    for &p in &participants {
        total_weight += secure_weight(weighting, counts.get(&p).copied().flatten(), p)?;
    }
    let partials = participants
        .iter()
        .map(|&r| matrix.partial_sum(r))
        .collect::<Result<Vec<_>, _>>()?;
    for (&r, p) in participants.iter().zip(&partials) {
        if p.len() != like.len() {
            return Err(AggregationError::ShareLength {
                owner: r,
                recipient: r,
                expected: like.len(),
                actual: p.len(),
            });
        }
    }
    let total = share_combine(&partials)?;
    Ok(AggregationResult {
        round: matrix.round,
        global_update: finish_secure_sum(&total, total_weight, codec, like)?,
        participants,
        scheme: AggregationScheme::SecureSum,
        weighting,
    })
}
