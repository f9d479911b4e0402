//! One round of full-mesh peer exchange.
//!
//! Plain mode sends the node's (privatized) parameters to every peer and
//! averages what comes back. Secure mode never reveals them: the node splits
//! `weight * params` into one additive share per participant, keeps its own,
//! sends the rest, then broadcasts the ring sum of the shares addressed to it.
//! The sum of every participant's partial sum is the weighted total, which
//! decodes to the same weighted mean the plain mode computes.

use std::collections::{BTreeMap, BTreeSet};

use colearn_core::aggregation::{
    fedavg, finish_secure_sum, secure_contribution, secure_weight, AggregationError, Contribution, Weighting,
};
use colearn_core::privacy::{share_combine, FixedPointCodec, RingVec, SecretShare};
use colearn_core::wire::{Message, PeerInfo, ShareStage};
use colearn_core::{ClientId, ParamVector};

/// Why an exchange could not produce an aggregate.
#[derive(Debug, Clone, PartialEq)]
pub enum ExchangeFailure {
    Aggregation(String),
    BadPayload { peer: ClientId, detail: String },
}

impl std::fmt::Display for ExchangeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExchangeFailure::Aggregation(e) => write!(f, "aggregation failed: {e}"),
            ExchangeFailure::BadPayload { peer, detail } => write!(f, "bad payload from peer {peer}: {detail}"),
        }
    }
}

impl From<AggregationError> for ExchangeFailure {
    fn from(e: AggregationError) -> Self {
        ExchangeFailure::Aggregation(e.to_string())
    }
}

#[derive(Debug, Clone)]
enum Mode {
    Plain {
        received: BTreeMap<ClientId, Contribution>,
    },
    Secure {
        codec: FixedPointCodec,
        /// This node's share of its own input.
        own_share: RingVec,
        inputs: BTreeMap<ClientId, RingVec>,
        partials: BTreeMap<ClientId, RingVec>,
        own_partial: Option<RingVec>,
    },
}

/// Result of feeding a message to an exchange.
#[derive(Debug)]
pub enum Progress {
    /// Messages to send to peers, keyed by recipient.
    Pending(Vec<(ClientId, Message)>),
    /// The aggregate, plus final messages peers still need from this node.
    Complete {
        aggregate: ParamVector,
        send: Vec<(ClientId, Message)>,
    },
    Failed(ExchangeFailure),
}

#[derive(Debug, Clone)]
pub struct Exchange {
    pub round: u64,
    pub me: ClientId,
    /// All participants, ascending, including this node.
    pub participants: Vec<ClientId>,
    pub deadline: u64,
    weighting: Weighting,
    contribution: ParamVector,
    sample_count: u64,
    counts: BTreeMap<ClientId, Option<u64>>,
    mode: Mode,
}

/// Splits the peer list by the dial rule: a node dials every peer with a
/// larger client id and accepts connections from every smaller one, so each
/// pair ends up with exactly one connection.
pub fn dial_plan(me: ClientId, peers: &[PeerInfo]) -> (Vec<PeerInfo>, Vec<ClientId>) {
    let dial = peers.iter().filter(|p| p.client_id > me).cloned().collect();
    let accept = peers.iter().filter(|p| p.client_id < me).map(|p| p.client_id).collect();
    (dial, accept)
}

impl Exchange {
    /// Starts an exchange and returns the first messages to send.
    #[allow(clippy::too_many_arguments)]
    pub fn start(
        round: u64,
        me: ClientId,
        participants: BTreeSet<ClientId>,
        deadline: u64,
        weighting: Weighting,
        contribution: ParamVector,
        sample_count: u64,
        secure: Option<(FixedPointCodec, u64)>,
    ) -> (Exchange, Progress) {
        let participants: Vec<ClientId> = participants.into_iter().collect();
        let others: Vec<ClientId> = participants.iter().copied().filter(|p| *p != me).collect();
        let mut counts = BTreeMap::new();
        counts.insert(me, Some(sample_count));
        let mut out = Vec::new();
        let mode = match secure {
            None => {
                for &p in &others {
                    out.push((
                        p,
                        Message::PeerUpdate {
                            round,
                            params: contribution.clone(),
                            sample_count: Some(sample_count),
                        },
                    ));
                }
                Mode::Plain {
                    received: BTreeMap::new(),
                }
            }
            Some((codec, seed)) => {
                let shares = match secure_contribution(
                    &contribution,
                    Some(sample_count),
                    weighting,
                    &codec,
                    participants.len(),
                    me,
                    round,
                    seed,
                ) {
                    Ok(s) => s,
                    Err(e) => {
                        let ex = Exchange::empty(round, me, participants, deadline, weighting, contribution, sample_count);
                        return (ex, Progress::Failed(e.into()));
                    }
                };
                let mut own_share = RingVec(Vec::new());
                for (share, &recipient) in shares.into_iter().zip(&participants) {
                    if recipient == me {
                        own_share = share.values;
                    } else {
                        out.push((
                            recipient,
                            Message::PeerShare {
                                round,
                                stage: ShareStage::Input,
                                share,
                                sample_count: Some(sample_count),
                            },
                        ));
                    }
                }
                Mode::Secure {
                    codec,
                    own_share,
                    inputs: BTreeMap::new(),
                    partials: BTreeMap::new(),
                    own_partial: None,
                }
            }
        };
        let mut ex = Exchange {
            round,
            me,
            participants,
            deadline,
            weighting,
            contribution,
            sample_count,
            counts,
            mode,
        };
        let progress = match ex.advance() {
            Progress::Pending(more) => {
                out.extend(more);
                Progress::Pending(out)
            }
            Progress::Complete { aggregate, send } => {
                out.extend(send);
                Progress::Complete { aggregate, send: out }
            }
            failed => failed,
        };
        (ex, progress)
    }

    fn empty(
        round: u64,
        me: ClientId,
        participants: Vec<ClientId>,
        deadline: u64,
        weighting: Weighting,
        contribution: ParamVector,
        sample_count: u64,
    ) -> Exchange {
        Exchange {
            round,
            me,
            participants,
            deadline,
            weighting,
            contribution,
            sample_count,
            counts: BTreeMap::new(),
            mode: Mode::Plain {
                received: BTreeMap::new(),
            },
        }
    }

    fn others(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.participants.iter().copied().filter(move |p| *p != self.me)
    }

    pub fn is_participant(&self, peer: ClientId) -> bool {
        peer != self.me && self.participants.binary_search(&peer).is_ok()
    }

    /// Whether anything is still expected from `peer`.
    pub fn awaits(&self, peer: ClientId) -> bool {
        if !self.is_participant(peer) {
            return false;
        }
        match &self.mode {
            Mode::Plain { received } => !received.contains_key(&peer),
            Mode::Secure { inputs, partials, .. } => !inputs.contains_key(&peer) || !partials.contains_key(&peer),
        }
    }

    /// Feeds one peer message belonging to this round.
    pub fn receive(&mut self, from: ClientId, msg: Message) -> Progress {
        if !self.is_participant(from) {
            return Progress::Pending(Vec::new());
        }
        let len = self.contribution.len();
        let bad = |detail: String| Progress::Failed(ExchangeFailure::BadPayload { peer: from, detail });
        match (&mut self.mode, msg) {
            (
                Mode::Plain { received },
                Message::PeerUpdate {
                    round,
                    params,
                    sample_count,
                },
            ) => {
                if received.contains_key(&from) {
                    return Progress::Pending(Vec::new());
                }
                if !params.same_shape(&self.contribution) {
                    return bad("parameters do not match the task model".into());
                }
                self.counts.insert(from, sample_count);
                received.insert(
                    from,
                    Contribution {
                        client_id: from,
                        round,
                        payload: params,
                        sample_count,
                    },
                );
            }
            (
                Mode::Secure { inputs, partials, .. },
                Message::PeerShare {
                    stage,
                    share,
                    sample_count,
                    ..
                },
            ) => {
                if share.values.len() != len {
                    return bad(format!("share holds {} values, expected {len}", share.values.len()));
                }
                match stage {
                    ShareStage::Input => {
                        if inputs.contains_key(&from) {
                            return Progress::Pending(Vec::new());
                        }
                        self.counts.insert(from, sample_count);
                        inputs.insert(from, share.values);
                    }
                    ShareStage::Partial => {
                        partials.entry(from).or_insert(share.values);
                    }
                }
            }
            (_, other) => return bad(format!("{} does not fit this exchange", other.kind())),
        }
        self.advance()
    }

    fn advance(&mut self) -> Progress {
        let others: Vec<ClientId> = self.others().collect();
        match &mut self.mode {
            Mode::Plain { received } => {
                if received.len() < others.len() {
                    return Progress::Pending(Vec::new());
                }
                let mut contribs: Vec<Contribution> = received.values().cloned().collect();
                contribs.push(Contribution {
                    client_id: self.me,
                    round: self.round,
                    payload: self.contribution.clone(),
                    sample_count: Some(self.sample_count),
                });
                match fedavg(&contribs, self.weighting) {
                    Ok(r) => Progress::Complete {
                        aggregate: r.global_update,
                        send: Vec::new(),
                    },
                    Err(e) => Progress::Failed(e.into()),
                }
            }
            Mode::Secure {
                codec,
                own_share,
                inputs,
                partials,
                own_partial,
            } => {
                let mut out = Vec::new();
                if own_partial.is_none() && inputs.len() == others.len() {
                    let column = std::iter::once(&*own_share).chain(inputs.values());
                    let partial = match share_combine(column) {
                        Ok(p) => p,
                        Err(e) => return Progress::Failed(AggregationError::from(e).into()),
                    };
                    let index = self.participants.iter().position(|p| *p == self.me).unwrap_or(0);
                    for &p in &others {
                        out.push((
                            p,
                            Message::PeerShare {
                                round: self.round,
                                stage: ShareStage::Partial,
                                share: SecretShare {
                                    owner_id: self.me,
                                    for_round: self.round,
                                    share_index: index as u32,
                                    values: partial.clone(),
                                },
                                sample_count: Some(self.sample_count),
                            },
                        ));
                    }
                    *own_partial = Some(partial);
                }
                let Some(mine) = own_partial.as_ref() else {
                    return Progress::Pending(out);
                };
                if partials.len() < others.len() {
                    return Progress::Pending(out);
                }
                let total = match share_combine(std::iter::once(mine).chain(partials.values())) {
                    Ok(t) => t,
                    Err(e) => return Progress::Failed(AggregationError::from(e).into()),
                };
                let mut weight = 0u64;
                for (&client, &count) in &self.counts {
                    match secure_weight(self.weighting, count, client) {
                        Ok(w) => weight += w,
                        Err(e) => return Progress::Failed(e.into()),
                    }
                }
                match finish_secure_sum(&total, weight, codec, &self.contribution) {
                    Ok(mean) => Progress::Complete {
                        aggregate: mean,
                        send: out,
                    },
                    Err(e) => Progress::Failed(e.into()),
                }
            }
        }
    }
}
