//! State shared by every connection and session task.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use tokio::sync::mpsc::UnboundedSender;

use teleop_core::arm::ArmConfig;
use teleop_core::gateway::auth::TokenSigner;
use teleop_core::gateway::wire::{Auth, ErrorCode, ErrorPayload, Hello, Leaderboard, TaskInfo};
use teleop_core::gateway::{Body, ConnId, PROTOCOL_VERSION};
use teleop_core::progression::{valid_username, Badge, PersistentStore, PlayerId, PlayerProfile};
use teleop_core::session::{SessionId, SessionSummary};
use teleop_core::task::{TaskCatalog, TaskId};

use crate::config::ServerConfig;
use crate::live::SessionMsg;
use crate::metrics::SessionMetrics;

pub const AGENT: &str = concat!("teleop-server/", env!("CARGO_PKG_VERSION"));

/// A running session as seen from outside its task.
#[derive(Clone)]
pub(crate) struct SessionEntry {
    pub tx: UnboundedSender<SessionMsg>,
    pub operator: PlayerId,
    pub task: TaskId,
}

/// What is kept of a session after it ended.
#[derive(Debug, Clone)]
pub struct FinishedSession {
    pub summary: SessionSummary,
    pub episodes: Vec<PathBuf>,
    pub metrics: SessionMetrics,
}

pub(crate) struct Hub {
    pub config: ServerConfig,
    pub catalog: TaskCatalog,
    pub arm: Arc<ArmConfig>,
    pub signer: TokenSigner,
    pub progression: Mutex<PersistentStore>,
    pub sessions: Mutex<HashMap<SessionId, SessionEntry>>,
    pub live_metrics: Mutex<HashMap<SessionId, Arc<Mutex<SessionMetrics>>>>,
    pub finished: Mutex<HashMap<SessionId, FinishedSession>>,
    next_conn: AtomicU64,
    tasks: Vec<TaskInfo>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn random_player_id() -> PlayerId {
    let bytes: [u8; 8] = rand::random();
    PlayerId::new(bytes.iter().map(|b| format!("{b:02x}")).collect::<String>())
}

pub(crate) fn error(code: ErrorCode, message: impl Into<String>) -> Body {
    Body::error(code, message)
}

impl Hub {
    pub fn new(
        config: ServerConfig,
        catalog: TaskCatalog,
        arm: ArmConfig,
        signer: TokenSigner,
        progression: PersistentStore,
    ) -> Self {
        let tasks = catalog.iter().map(TaskInfo::from).collect();
        Self {
            config,
            catalog,
            arm: Arc::new(arm),
            signer,
            progression: Mutex::new(progression),
            sessions: Mutex::default(),
            live_metrics: Mutex::default(),
            finished: Mutex::default(),
            next_conn: AtomicU64::new(1),
            tasks,
        }
    }

    pub fn next_conn_id(&self) -> ConnId {
        self.next_conn.fetch_add(1, Ordering::Relaxed)
    }

    pub fn session(&self, id: &SessionId) -> Option<SessionEntry> {
        self.sessions.lock().expect("sessions lock").get(id).cloned()
    }

    /// Answers a client hello: the chosen version and the task menu.
    pub fn hello(&self, h: &Hello) -> Body {
        if !h.versions.contains(&PROTOCOL_VERSION) {
            return Body::Error(ErrorPayload {
                code: ErrorCode::UnsupportedVersion,
                message: format!("client speaks {:?}", h.versions),
                supported: vec![PROTOCOL_VERSION],
            });
        }
        Body::Hello(Hello {
            versions: vec![PROTOCOL_VERSION],
            agent: AGENT.into(),
            tasks: self.tasks.clone(),
        })
    }

    pub fn leaderboard(&self, top: u32) -> Body {
        let entries = self.progression.lock().expect("progression lock").store().leaderboard(top as usize);
        Body::LeaderboardUpdate(Leaderboard::Snapshot { entries })
    }

    pub fn profile(&self, player: &PlayerId) -> Option<PlayerProfile> {
        self.progression.lock().expect("progression lock").store().profile(player).cloned()
    }

    /// Handles login and resume. `Ok` carries the granted player.
    pub fn authenticate(&self, auth: &Auth) -> Result<(PlayerId, Body), Body> {
        let profile = match auth {
            Auth::Login { username, avatar_id } => {
                if !valid_username(username) {
                    return Err(error(ErrorCode::Malformed, format!("invalid username {username:?}")));
                }
                let mut store = self.progression.lock().expect("progression lock");
                match store.store().by_username(username).cloned() {
                    Some(p) => p,
                    None => store
                        .register(random_player_id(), username, *avatar_id, now_ms())
                        .map_err(|e| error(ErrorCode::Internal, e.to_string()))?,
                }
            }
            Auth::Resume { token } => {
                let player = self
                    .signer
                    .verify(token)
                    .ok_or_else(|| error(ErrorCode::Unauthorized, "invalid token"))?;
                self.profile(&player)
                    .ok_or_else(|| error(ErrorCode::Unauthorized, "unknown player"))?
            }
            Auth::Granted { .. } => return Err(error(ErrorCode::Unexpected, "granted is a server message")),
        };
        let player = profile.player_id.clone();
        let token = self.signer.issue(&player);
        Ok((
            player.clone(),
            Body::Auth(Auth::Granted {
                player_id: player,
                token,
                profile,
            }),
        ))
    }

    /// Credits a finished session. Replays of the same summary are no-ops.
    pub fn apply_summary(&self, summary: &SessionSummary) -> (Vec<Badge>, Option<PlayerProfile>) {
        let mut store = self.progression.lock().expect("progression lock");
        let unlocked = store.apply_summary(summary).unwrap_or_else(|e| {
            log::error!("progression update for {} failed: {e}", summary.summary_id);
            Vec::new()
        });
        (unlocked, store.store().profile(&summary.player).cloned())
    }
}
