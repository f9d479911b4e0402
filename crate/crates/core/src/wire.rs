//! Message schema and framing for coordinator and peer traffic.
//!
//! A frame is a 4-byte big-endian body length followed by a UTF-8 JSON
//! [`Envelope`]. Parameter vectors travel as base64 of their checkpoint
//! encoding; secret shares as base64 of their length-prefixed ring encoding.
//! Browser sockets carry the same JSON bodies without the length prefix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::ClientId;
use crate::params::ParamVector;
use crate::privacy::SecretShare;
use crate::task::TaskSpec;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;
const PREFIX_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame of {len} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    Oversize { len: usize },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("protocol version {found} is not supported (this build speaks {PROTOCOL_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PeerInfo {
    pub client_id: ClientId,
    pub address: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ShareStage {
    /// A share of the sender's own weighted update.
    Input,
    /// The sender's ring sum of all input shares it received.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all_fields = "camelCase")]
pub enum Message {
    JoinTask {
        capabilities: Vec<String>,
        listen_address: Option<String>,
    },
    Assigned {
        client_id: ClientId,
        task: TaskSpec,
    },
    /// `global_params` is `None` in decentralized sessions.
    RoundStart {
        round: u64,
        global_params: Option<ParamVector>,
    },
    UpdateUpload {
        round: u64,
        payload: ParamVector,
        sample_count: Option<u64>,
    },
    ReadySignal {
        round: u64,
    },
    PeerList {
        round: u64,
        peers: Vec<PeerInfo>,
    },
    PeerShare {
        round: u64,
        stage: ShareStage,
        share: SecretShare,
        sample_count: Option<u64>,
    },
    PeerUpdate {
        round: u64,
        params: ParamVector,
        sample_count: Option<u64>,
    },
    GlobalUpdate {
        round: u64,
        params: ParamVector,
        participant_count: usize,
    },
    SessionPaused {
        reason: String,
    },
    Leave {},
    MetricsReport {
        round: u64,
        epoch: u64,
        loss: f64,
        accuracy: f64,
    },
    Error {
        code: String,
        detail: String,
    },
    Heartbeat {},
    /// First frame on a peer connection, sent by the dialing side.
    PeerHello {
        client_id: ClientId,
    },
    /// Peer tells the coordinator how its exchange for `round` ended.
    RoundReport {
        round: u64,
        completed: bool,
    },
    SessionFinished {
        rounds: u64,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::JoinTask { .. } => "JoinTask",
            Message::Assigned { .. } => "Assigned",
            Message::RoundStart { .. } => "RoundStart",
            Message::UpdateUpload { .. } => "UpdateUpload",
            Message::ReadySignal { .. } => "ReadySignal",
            Message::PeerList { .. } => "PeerList",
            Message::PeerShare { .. } => "PeerShare",
            Message::PeerUpdate { .. } => "PeerUpdate",
            Message::GlobalUpdate { .. } => "GlobalUpdate",
            Message::SessionPaused { .. } => "SessionPaused",
            Message::Leave {} => "Leave",
            Message::MetricsReport { .. } => "MetricsReport",
            Message::Error { .. } => "Error",
            Message::Heartbeat {} => "Heartbeat",
            Message::PeerHello { .. } => "PeerHello",
            Message::RoundReport { .. } => "RoundReport",
            Message::SessionFinished { .. } => "SessionFinished",
        }
    }

    /// True when the message embeds model parameters or secret shares.
    pub fn carries_model_payload(&self) -> bool {
        matches!(
            self,
            Message::RoundStart {
                global_params: Some(_),
                ..
            } | Message::UpdateUpload { .. }
                | Message::PeerShare { .. }
                | Message::PeerUpdate { .. }
                | Message::GlobalUpdate { .. }
        )
    }

    pub fn round(&self) -> Option<u64> {
        match self {
            Message::RoundStart { round, .. }
            | Message::UpdateUpload { round, .. }
            | Message::ReadySignal { round }
            | Message::PeerList { round, .. }
            | Message::PeerShare { round, .. }
            | Message::PeerUpdate { round, .. }
            | Message::GlobalUpdate { round, .. }
            | Message::MetricsReport { round, .. }
            | Message::RoundReport { round, .. } => Some(*round),
            _ => None,
        }
    }

    pub fn error(code: &str, detail: impl Into<String>) -> Message {
        Message::Error {
            code: code.to_string(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Envelope {
    pub protocol_version: u32,
    pub task_id: String,
    pub body: Message,
}

impl Envelope {
    pub fn new(task_id: impl Into<String>, body: Message) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION,
            task_id: task_id.into(),
            body,
        }
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct VersionProbe {
    protocol_version: u32,
}

/// JSON body without the length prefix.
pub fn encode_body(env: &Envelope) -> Vec<u8> {
    serde_json::to_vec(env).expect("envelope serialization is infallible")
}

pub fn decode_body(body: &[u8]) -> Result<Envelope, WireError> {
    let probe: VersionProbe =
        serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))?;
    if probe.protocol_version != PROTOCOL_VERSION {
        return Err(WireError::VersionMismatch {
            found: probe.protocol_version,
        });
    }
    serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))
}

pub fn encode_msg(env: &Envelope) -> Result<Vec<u8>, WireError> {
    let body = encode_body(env);
    if body.len() > MAX_FRAME_LEN {
        return Err(WireError::Oversize { len: body.len() });
    }
    let mut out = Vec::with_capacity(PREFIX_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes exactly one complete frame.
pub fn decode_msg(frame: &[u8]) -> Result<Envelope, WireError> {
    match try_decode(frame)? {
        Some((env, used)) if used == frame.len() => Ok(env),
        Some((_, used)) => Err(WireError::Malformed(format!(
            "{} trailing bytes after frame",
            frame.len() - used
        ))),
        None => Err(WireError::Malformed("truncated frame".into())),
    }
}

/// Length announced by a frame prefix, validated against the size limit.
pub fn frame_len(prefix: [u8; 4]) -> Result<usize, WireError> {
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::Oversize { len });
    }
    Ok(len)
}

/// Streaming decode: `Ok(None)` when `buf` does not yet hold a whole frame,
/// otherwise the envelope and the number of bytes consumed.
pub fn try_decode(buf: &[u8]) -> Result<Option<(Envelope, usize)>, WireError> {
    if buf.len() < PREFIX_LEN {
        return Ok(None);
    }
    let len = frame_len(buf[..PREFIX_LEN].try_into().unwrap())?;
    if buf.len() < PREFIX_LEN + len {
        return Ok(None);
    }
    let env = decode_body(&buf[PREFIX_LEN..PREFIX_LEN + len])?;
    Ok(Some((env, PREFIX_LEN + len)))
}

pub fn write_frame(w: &mut impl std::io::Write, env: &Envelope) -> Result<(), WireError> {
    w.write_all(&encode_msg(env)?)?;
    Ok(())
}

/// Blocking read of one frame. A stream that ends mid-frame is malformed.
pub fn read_frame(r: &mut impl std::io::Read) -> Result<Envelope, WireError> {
    let mut prefix = [0u8; PREFIX_LEN];
    r.read_exact(&mut prefix)?;
    let len = frame_len(prefix)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => WireError::Malformed("truncated frame".into()),
        _ => WireError::Io(e),
    })?;
    decode_body(&body)
}
