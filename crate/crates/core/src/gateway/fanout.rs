//! Per-connection outbound queues and the broadcast cadence.
//!
//! Each connection has one ordered [`Outbox`]. Events and other reliable
//! messages are never dropped; a pending state update or cloud chunk is
//! replaced by a newer one (latest wins), so a slow reader skips stale
//! poses but sees every event in order. A reliable backlog beyond the cap
//! marks the connection for disconnect.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::cloud::{synth_point_cloud, PointCloudChunk};
use crate::session::SessionState;
use crate::task::{goal_overlay, GameEvent, GameEventKind};

use super::camera::CameraHint;
use super::wire::{Body, ObjectState, OverlayUpdate, Role, StateUpdate, WireMessage};

pub type ConnId = u64;

/// Server ticks per state update: 20 Hz at 60 Hz.
pub const STATE_EVERY_TICKS: u64 = 3;
/// Server ticks per cloud chunk: 10 Hz at 60 Hz.
pub const CLOUD_EVERY_TICKS: u64 = 6;
pub const DEFAULT_EVENT_QUEUE_CAP: usize = 1024;
pub const DEFAULT_MAX_SPECTATORS: usize = 32;
pub const DEFAULT_CLOUD_BUDGET: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Reliable,
    State,
    Cloud,
}

#[derive(Debug)]
pub struct Outbox {
    queue: VecDeque<(Slot, Body)>,
    reliable: usize,
    cap: usize,
    next_seq: u64,
    overflowed: bool,
    coalesced: u64,
}

impl Outbox {
    pub fn new(cap: usize) -> Self {
        Self {
            queue: VecDeque::new(),
            reliable: 0,
            cap,
            next_seq: 1,
            overflowed: false,
            coalesced: 0,
        }
    }

    /// Queues a message that must be delivered. Returns false once the
    /// reliable backlog has exceeded the cap.
    pub fn push_reliable(&mut self, body: Body) -> bool {
        self.queue.push_back((Slot::Reliable, body));
        self.reliable += 1;
        if self.reliable > self.cap {
            self.overflowed = true;
        }
        !self.overflowed
    }

    fn push_latest(&mut self, slot: Slot, body: Body) {
        if let Some(i) = self.queue.iter().position(|(s, _)| *s == slot) {
            self.queue.remove(i);
            self.coalesced += 1;
        }
        self.queue.push_back((slot, body));
    }

    pub fn push_state(&mut self, state: StateUpdate) {
        self.push_latest(Slot::State, Body::StateUpdate(Box::new(state)));
    }

    pub fn push_cloud(&mut self, cloud: PointCloudChunk) {
        self.push_latest(Slot::Cloud, Body::CloudChunk(cloud));
    }

    /// Everything queued, in order, with per-connection sequence numbers.
    pub fn drain(&mut self) -> Vec<WireMessage> {
        self.reliable = 0;
        self.queue
            .drain(..)
            .map(|(_, body)| {
                let seq = self.next_seq;
                self.next_seq += 1;
                WireMessage::new(seq, body)
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn overflowed(&self) -> bool {
        self.overflowed
    }

    /// State and cloud messages replaced before delivery.
    pub fn coalesced(&self) -> u64 {
        self.coalesced
    }
}

pub type SharedOutbox = Arc<Mutex<Outbox>>;
pub type Waker = Arc<dyn Fn() + Send + Sync>;

struct Conn {
    role: Role,
    outbox: SharedOutbox,
    wake: Waker,
}

impl Conn {
    fn with<R>(&self, f: impl FnOnce(&mut Outbox) -> R) -> R {
        let r = f(&mut self.outbox.lock().expect("outbox lock poisoned"));
        (self.wake)();
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FanoutConfig {
    pub max_spectators: usize,
    pub event_queue_cap: usize,
    pub cloud_budget: usize,
}

impl Default for FanoutConfig {
    fn default() -> Self {
        Self {
            max_spectators: DEFAULT_MAX_SPECTATORS,
            event_queue_cap: DEFAULT_EVENT_QUEUE_CAP,
            cloud_budget: DEFAULT_CLOUD_BUDGET,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttachError {
    #[error("the operator slot is taken")]
    OperatorSlotTaken,
    #[error("spectator limit of {0} reached")]
    SpectatorLimit(usize),
    #[error("connection {0} is already attached")]
    Duplicate(ConnId),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickReport {
    pub queue_sizes: BTreeMap<ConnId, usize>,
    /// Connections whose reliable backlog overflowed; the caller disconnects them.
    pub overflowed: Vec<ConnId>,
    pub sent_state: bool,
    pub sent_cloud: bool,
}

/// Builds the authoritative state message.
pub fn capture_state(session: &SessionState, tick: u64, keyframe: bool, spectators: u32) -> StateUpdate {
    StateUpdate {
        session: session.session_id,
        tick,
        keyframe,
        phase: session.phase,
        task: session.task.clone(),
        attempt: session.attempt_index,
        clock: session.clock,
        time_limit: session.time_limit(),
        countdown: session.countdown_remaining,
        q: *session.arm.q(),
        gripper_aperture: session.arm.gripper().aperture,
        gripper_closed: session.arm.gripper().commanded_closed,
        ee_pose: *session.arm.ee_pose(),
        objects: session
            .scene
            .objects
            .iter()
            .map(|o| ObjectState {
                id: o.id.clone(),
                pose: o.pose,
                attached: o.attached,
            })
            .collect(),
        lid_angle: session.scene.lid_angle,
        stages: session.progress.stages.iter().map(|s| s.achieved).collect(),
        score: session.score_so_far,
        spectators,
        camera: CameraHint::from_ee(session.arm.ee_pose()),
    }
}

pub fn capture_overlay(session: &SessionState) -> OverlayUpdate {
    OverlayUpdate {
        task: session.task.clone(),
        attempt: session.attempt_index,
        overlay: goal_overlay(session.spec(), &session.scene.goal, &session.scene, &session.progress.scanned).ok(),
    }
}

pub fn capture_cloud(session: &SessionState, frame_id: u32, budget: usize) -> PointCloudChunk {
    synth_point_cloud(&session.scene, budget, frame_id, session.arm_config().safety.workspace)
}

/// Fan-out hub for one session.
pub struct Fanout {
    config: FanoutConfig,
    conns: BTreeMap<ConnId, Conn>,
    tick: u64,
    frame_id: u32,
}

impl Fanout {
    pub fn new(config: FanoutConfig) -> Self {
        Self {
            config,
            conns: BTreeMap::new(),
            tick: 0,
            frame_id: 0,
        }
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn operator(&self) -> Option<ConnId> {
        self.conns.iter().find(|(_, c)| c.role == Role::Operator).map(|(id, _)| *id)
    }

    pub fn spectators(&self) -> BTreeSet<ConnId> {
        self.conns
            .iter()
            .filter(|(_, c)| c.role == Role::Spectator)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.conns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conns.is_empty()
    }

    /// Adds a connection and queues its snapshot: a keyframe state, the
    /// goal overlay and the current point cloud.
    pub fn attach(
        &mut self,
        id: ConnId,
        role: Role,
        session: &SessionState,
        wake: Waker,
    ) -> Result<SharedOutbox, AttachError> {
        let outbox = Arc::new(Mutex::new(Outbox::new(self.config.event_queue_cap)));
        self.attach_outbox(id, role, session, outbox.clone(), wake)?;
        Ok(outbox)
    }

    /// Like [`Fanout::attach`], but queues into an outbox the caller owns.
    pub fn attach_outbox(
        &mut self,
        id: ConnId,
        role: Role,
        session: &SessionState,
        outbox: SharedOutbox,
        wake: Waker,
    ) -> Result<(), AttachError> {
        if self.conns.contains_key(&id) {
            return Err(AttachError::Duplicate(id));
        }
        match role {
            Role::Operator if self.operator().is_some() => return Err(AttachError::OperatorSlotTaken),
            Role::Spectator if self.spectators().len() >= self.config.max_spectators => {
                return Err(AttachError::SpectatorLimit(self.config.max_spectators))
            }
            _ => {}
        }
        let conn = Conn { role, outbox, wake };
        let spectators = self.spectators().len() as u32 + u32::from(role == Role::Spectator);
        let keyframe = capture_state(session, self.tick, true, spectators);
        let overlay = capture_overlay(session);
        let cloud = capture_cloud(session, self.frame_id, self.config.cloud_budget);
        conn.with(|o| {
            o.push_reliable(Body::StateUpdate(Box::new(keyframe)));
            o.push_reliable(Body::OverlayUpdate(overlay));
            o.push_cloud(cloud);
        });
        self.conns.insert(id, conn);
        Ok(())
    }

    pub fn detach(&mut self, id: ConnId) -> Option<Role> {
        self.conns.remove(&id).map(|c| c.role)
    }

    pub fn role(&self, id: ConnId) -> Option<Role> {
        self.conns.get(&id).map(|c| c.role)
    }

    /// Queues a reliable message for one connection.
    pub fn send_to(&self, id: ConnId, body: Body) -> bool {
        self.conns.get(&id).is_some_and(|c| c.with(|o| o.push_reliable(body)))
    }

    /// Queues a reliable message for every connection.
    pub fn broadcast(&self, body: &Body) -> Vec<ConnId> {
        self.conns
            .iter()
            .filter(|(_, c)| !c.with(|o| o.push_reliable(body.clone())))
            .map(|(id, _)| *id)
            .collect()
    }

    /// Whether the next [`Fanout::broadcast_tick`] sends a cloud chunk.
    pub fn cloud_due(&self) -> bool {
        (self.tick + 1) % CLOUD_EVERY_TICKS == 0
    }

    /// Called once per server tick after the session advanced: events go
    /// out at once, state every [`STATE_EVERY_TICKS`], and `cloud` (when
    /// given) every [`CLOUD_EVERY_TICKS`].
    pub fn broadcast_tick(
        &mut self,
        session: &SessionState,
        events: &[GameEvent],
        cloud: Option<PointCloudChunk>,
    ) -> TickReport {
        self.tick += 1;
        let mut report = TickReport::default();
        let overlay_changed = events.iter().any(|e| {
            matches!(
                e.kind,
                GameEventKind::AttemptStart { .. } | GameEventKind::ReceiptCheck { .. }
            )
        });
        let overlay = overlay_changed.then(|| capture_overlay(session));
        let state = (self.tick % STATE_EVERY_TICKS == 0)
            .then(|| capture_state(session, self.tick, false, self.spectators().len() as u32));
        let cloud = if self.tick % CLOUD_EVERY_TICKS == 0 {
            cloud.map(|mut c| {
                self.frame_id = self.frame_id.wrapping_add(1);
                c.frame_id = self.frame_id;
                c
            })
        } else {
            None
        };
        report.sent_state = state.is_some();
        report.sent_cloud = cloud.is_some();
        for (id, conn) in &self.conns {
            let (len, ok) = conn.with(|o| {
                let mut ok = true;
                for e in events {
                    ok &= o.push_reliable(Body::Event(e.clone()));
                }
                if let Some(ov) = &overlay {
                    ok &= o.push_reliable(Body::OverlayUpdate(ov.clone()));
                }
                if let Some(s) = &state {
                    o.push_state(s.clone());
                }
                if let Some(c) = &cloud {
                    o.push_cloud(c.clone());
                }
                (o.len(), ok)
            });
            report.queue_sizes.insert(*id, len);
            if !ok {
                report.overflowed.push(*id);
            }
        }
        report
    }
}
