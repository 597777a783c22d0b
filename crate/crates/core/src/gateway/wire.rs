//! Versioned wire protocol.
//!
//! Every message is an envelope of protocol version, per-connection sequence
//! number, message type and payload. All types except `cloud_chunk` travel
//! as JSON text frames:
//!
//! ```text
//! {"v":1,"type":"event","seq":42,"payload":{...}}
//! ```
//!
//! `cloud_chunk` travels as a binary frame, all integers and floats
//! little-endian:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 2 | protocol version (u16) |
//! | 2 | 1 | type tag, 8 for `cloud_chunk` |
//! | 3 | 1 | reserved, 0 |
//! | 4 | 8 | seq (u64) |
//! | 12 | 4 | frame_id (u32) |
//! | 16 | 4 | count (u32) |
//! | 20 | 48 | bounds: min x, y, z then max x, y, z (f64) |
//! | 68 | 9 × count | points: x, y, z cell (u16 each) then r, g, b (u8 each) |
//!
//! A frame whose version differs from [`PROTOCOL_VERSION`] decodes to
//! [`WireError::UnsupportedVersion`]; the connection stays open so the peer
//! can retry with a supported version.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::arm::JointVector;
use crate::cloud::{PointCloudChunk, QuantizedPoint};
use crate::geometry::{Aabb, Pose3};
use crate::progression::{Badge, LeaderboardEntry, PlayerId, PlayerProfile};
use crate::session::{Phase, SessionId, SessionSummary};
use crate::task::{GameEvent, OverlayPayload, TaskId, TaskRole, TaskSpec};

use super::camera::CameraHint;

pub const PROTOCOL_VERSION: u32 = 1;
pub const CLOUD_HEADER_LEN: usize = 68;
pub const CLOUD_POINT_LEN: usize = 9;

/// Message type names in tag order; the binary tag is the index.
pub const MESSAGE_TYPES: [&str; 12] = [
    "hello",
    "auth",
    "join_operator",
    "join_spectator",
    "input",
    "state_update",
    "overlay_update",
    "event",
    "cloud_chunk",
    "session_end",
    "leaderboard_update",
    "error",
];

const CLOUD_TAG: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Operator,
    Spectator,
}

impl std::str::FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "operator" => Ok(Role::Operator),
            "spectator" => Ok(Role::Spectator),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub id: TaskId,
    pub role: TaskRole,
    pub narrative: String,
    pub time_limit: f64,
    pub stages: Vec<String>,
    pub max_attempts: u32,
}

impl From<&TaskSpec> for TaskInfo {
    fn from(spec: &TaskSpec) -> Self {
        Self {
            id: spec.id.clone(),
            role: spec.role,
            narrative: spec.narrative.clone(),
            time_limit: spec.time_limit,
            stages: spec.stages.iter().map(|s| s.id.clone()).collect(),
            max_attempts: spec.max_attempts,
        }
    }
}

/// Version negotiation. The client lists what it speaks; the server answers
/// with the single version it chose and the task menu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub versions: Vec<u32>,
    pub agent: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Auth {
    /// Register a new player, or log in when the username already exists.
    Login { username: String, avatar_id: u32 },
    Resume { token: String },
    Granted {
        player_id: PlayerId,
        token: String,
        profile: PlayerProfile,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Join {
    /// Operators name a task to start a new session, or a session id to
    /// reattach; spectators name a session.
    Request {
        #[serde(default)]
        session: Option<SessionId>,
        #[serde(default)]
        task: Option<TaskId>,
        #[serde(default, with = "crate::u64_text::option")]
        seed: Option<u64>,
    },
    Accepted {
        session: SessionId,
        task: TaskId,
        role: Role,
        spectator_path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Input {
    /// The envelope `seq` orders joint inputs; stale ones are dropped.
    Joint {
        target_q: JointVector,
        gripper_closed: bool,
        client_timestamp: u64,
    },
    Start,
    NextAttempt { reuse_seed: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: String,
    pub pose: Pose3,
    pub attached: bool,
}

/// Full authoritative state; every update is self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub session: SessionId,
    /// Server tick counter; strictly increasing across a session.
    pub tick: u64,
    pub keyframe: bool,
    pub phase: Phase,
    pub task: TaskId,
    pub attempt: u32,
    pub clock: f64,
    pub time_limit: f64,
    pub countdown: f64,
    pub q: JointVector,
    pub gripper_aperture: f64,
    pub gripper_closed: bool,
    pub ee_pose: Pose3,
    pub objects: Vec<ObjectState>,
    pub lid_angle: f64,
    pub stages: Vec<bool>,
    pub score: u64,
    pub spectators: u32,
    pub camera: CameraHint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayUpdate {
    pub task: TaskId,
    pub attempt: u32,
    /// Target tasks have no overlay.
    pub overlay: Option<OverlayPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SessionEnd {
    Request,
    Summary {
        summary: SessionSummary,
        unlocked: Vec<Badge>,
        profile: Option<PlayerProfile>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Leaderboard {
    Request { top: u32 },
    Snapshot { entries: Vec<LeaderboardEntry> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnsupportedVersion,
    Malformed,
    Unauthorized,
    SessionNotFound,
    OperatorSlotTaken,
    SpectatorLimit,
    ReadOnly,
    WrongPhase,
    UnknownTask,
    UsernameTaken,
    Unexpected,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
    /// Versions the server speaks, on `unsupported_version`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub supported: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Hello(Hello),
    Auth(Auth),
    JoinOperator(Join),
    JoinSpectator(Join),
    Input(Input),
    StateUpdate(Box<StateUpdate>),
    OverlayUpdate(OverlayUpdate),
    Event(GameEvent),
    CloudChunk(PointCloudChunk),
    SessionEnd(SessionEnd),
    LeaderboardUpdate(Leaderboard),
    Error(ErrorPayload),
}

impl Body {
    pub fn type_name(&self) -> &'static str {
        MESSAGE_TYPES[self.tag() as usize]
    }

    pub fn tag(&self) -> u8 {
        match self {
            Body::Hello(_) => 0,
            Body::Auth(_) => 1,
            Body::JoinOperator(_) => 2,
            Body::JoinSpectator(_) => 3,
            Body::Input(_) => 4,
            Body::StateUpdate(_) => 5,
            Body::OverlayUpdate(_) => 6,
            Body::Event(_) => 7,
            Body::CloudChunk(_) => CLOUD_TAG,
            Body::SessionEnd(_) => 9,
            Body::LeaderboardUpdate(_) => 10,
            Body::Error(_) => 11,
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Body {
        Body::Error(ErrorPayload {
            code,
            message: message.into(),
            supported: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub version: u32,
    pub seq: u64,
    pub body: Body,
}

impl WireMessage {
    pub fn new(seq: u64, body: Body) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            seq,
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Text(String),
    Binary(Vec<u8>),
}

impl Frame {
    pub fn len(&self) -> usize {
        match self {
            Frame::Text(s) => s.len(),
            Frame::Binary(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("malformed frame at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported protocol version {found}")]
    UnsupportedVersion { found: u32, seq: u64 },
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("invalid {kind} payload at {path}: {message}")]
    Payload {
        kind: &'static str,
        path: String,
        message: String,
    },
}

impl WireError {
    pub fn code(&self) -> ErrorCode {
        match self {
            WireError::UnsupportedVersion { .. } => ErrorCode::UnsupportedVersion,
            _ => ErrorCode::Malformed,
        }
    }

    /// The error message to send back to the peer.
    pub fn reply(&self) -> Body {
        let mut body = ErrorPayload {
            code: self.code(),
            message: self.to_string(),
            supported: Vec::new(),
        };
        if let WireError::UnsupportedVersion { .. } = self {
            body.supported = vec![PROTOCOL_VERSION];
        }
        Body::Error(body)
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a, P: Serialize> {
    v: u32,
    #[serde(rename = "type")]
    kind: &'a str,
    seq: u64,
    payload: &'a P,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    v: u32,
    #[serde(rename = "type")]
    kind: String,
    seq: u64,
    payload: Value,
}

fn text<P: Serialize>(msg: &WireMessage, payload: &P) -> Frame {
    let env = EnvelopeOut {
        v: msg.version,
        kind: msg.body.type_name(),
        seq: msg.seq,
        payload,
    };
    Frame::Text(serde_json::to_string(&env).expect("payloads serialize to JSON"))
}

pub fn encode(msg: &WireMessage) -> Frame {
    match &msg.body {
        Body::Hello(p) => text(msg, p),
        Body::Auth(p) => text(msg, p),
        Body::JoinOperator(p) | Body::JoinSpectator(p) => text(msg, p),
        Body::Input(p) => text(msg, p),
        Body::StateUpdate(p) => text(msg, p),
        Body::OverlayUpdate(p) => text(msg, p),
        Body::Event(p) => text(msg, p),
        Body::CloudChunk(c) => Frame::Binary(encode_cloud(msg.version, msg.seq, c)),
        Body::SessionEnd(p) => text(msg, p),
        Body::LeaderboardUpdate(p) => text(msg, p),
        Body::Error(p) => text(msg, p),
    }
}

fn encode_cloud(version: u32, seq: u64, c: &PointCloudChunk) -> Vec<u8> {
    let mut out = Vec::with_capacity(CLOUD_HEADER_LEN + CLOUD_POINT_LEN * c.points.len());
    out.extend_from_slice(&(version as u16).to_le_bytes());
    out.push(CLOUD_TAG);
    out.push(0);
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&c.frame_id.to_le_bytes());
    out.extend_from_slice(&c.count().to_le_bytes());
    for v in c.bounds.min.iter().chain(c.bounds.max.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &c.points {
        for v in p.xyz {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.rgb);
    }
    out
}

/// Byte offset of a serde_json error position.
fn json_offset(text: &str, e: &serde_json::Error) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(e.line().saturating_sub(1)).map(str::len).sum();
    (line_start + e.column()).min(text.len())
}

fn payload<T: DeserializeOwned>(kind: &'static str, v: Value) -> Result<T, WireError> {
    serde_path_to_error::deserialize(v).map_err(|e| WireError::Payload {
        kind,
        path: e.path().to_string(),
        message: e.into_inner().to_string(),
    })
}

pub fn decode(frame: &Frame) -> Result<WireMessage, WireError> {
    match frame {
        Frame::Text(t) => decode_text(t),
        Frame::Binary(b) => decode_binary(b),
    }
}

fn decode_text(text: &str) -> Result<WireMessage, WireError> {
    let env: EnvelopeIn = serde_json::from_str(text).map_err(|e| WireError::Malformed {
        offset: json_offset(text, &e),
        reason: e.to_string(),
    })?;
    if env.v != PROTOCOL_VERSION {
        return Err(WireError::UnsupportedVersion {
            found: env.v,
            seq: env.seq,
        });
    }
    let kind = MESSAGE_TYPES
        .iter()
        .copied()
        .find(|k| *k == env.kind)
        .ok_or_else(|| WireError::UnknownType(env.kind.clone()))?;
    let p = env.payload;
    let body = match kind {
        "hello" => Body::Hello(payload(kind, p)?),
        "auth" => Body::Auth(payload(kind, p)?),
        "join_operator" => Body::JoinOperator(payload(kind, p)?),
        "join_spectator" => Body::JoinSpectator(payload(kind, p)?),
        "input" => Body::Input(payload(kind, p)?),
        "state_update" => Body::StateUpdate(Box::new(payload(kind, p)?)),
        "overlay_update" => Body::OverlayUpdate(payload(kind, p)?),
        "event" => Body::Event(payload(kind, p)?),
        "session_end" => Body::SessionEnd(payload(kind, p)?),
        "leaderboard_update" => Body::LeaderboardUpdate(payload(kind, p)?),
        "error" => Body::Error(payload(kind, p)?),
        _ => {
            return Err(WireError::Malformed {
                offset: 0,
                reason: format!("{kind} must be sent as a binary frame"),
            })
        }
    };
    Ok(WireMessage {
        version: env.v,
        seq: env.seq,
        body,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N], WireError> {
        let end = self.pos + N;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| WireError::Malformed {
            offset: self.bytes.len(),
            reason: format!("truncated {what}: need {N} bytes at offset {}", self.pos),
        })?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice length is N"))
    }
}

fn decode_binary(bytes: &[u8]) -> Result<WireMessage, WireError> {
    let mut c = Cursor { bytes, pos: 0 };
    let version = u16::from_le_bytes(c.take("version")?) as u32;
    let [tag] = c.take::<1>("type tag")?;
    let [_reserved] = c.take::<1>("reserved byte")?;
    let seq = u64::from_le_bytes(c.take("seq")?);
    if version != PROTOCOL_VERSION {
        return Err(WireError::UnsupportedVersion { found: version, seq });
    }
    if tag != CLOUD_TAG {
        return Err(WireError::Malformed {
            offset: 2,
            reason: format!("type tag {tag} is not a binary message"),
        });
    }
    let frame_id = u32::from_le_bytes(c.take("frame_id")?);
    let count = u32::from_le_bytes(c.take("count")?) as usize;
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = f64::from_le_bytes(c.take("bounds")?);
    }
    let need = CLOUD_HEADER_LEN + count * CLOUD_POINT_LEN;
    if bytes.len() < need {
        return Err(WireError::Malformed {
            offset: bytes.len(),
            reason: format!("truncated points: {count} points need {need} bytes"),
        });
    }
    if bytes.len() > need {
        return Err(WireError::Malformed {
            offset: need,
            reason: format!("{} trailing bytes", bytes.len() - need),
        });
    }
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = u16::from_le_bytes(c.take("x")?);
        let y = u16::from_le_bytes(c.take("y")?);
        let z = u16::from_le_bytes(c.take("z")?);
        let rgb = c.take::<3>("rgb")?;
        points.push(QuantizedPoint { xyz: [x, y, z], rgb });
    }
    Ok(WireMessage {
        version,
        seq,
        body: Body::CloudChunk(PointCloudChunk {
            frame_id,
            bounds: Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]]),
            points,
        }),
    })
}
