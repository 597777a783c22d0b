//! The per-session task: the single writer of one [`SessionState`].

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver};
use tokio::sync::oneshot;
use tokio::time::{Instant, MissedTickBehavior};

use teleop_core::dataset::EpisodeRecorder;
use teleop_core::gateway::fanout::{capture_cloud, capture_state};
use teleop_core::gateway::wire::{ErrorCode, Join, SessionEnd};
use teleop_core::gateway::{handle_inbound, Body, Common, ConnId, Fanout, Role, WireMessage};
use teleop_core::progression::PlayerId;
use teleop_core::session::{OperatorInput, Phase, SessionConfig, SessionId, SessionState, SessionSummary, DEFAULT_DT};
use teleop_core::task::{GameEvent, GameEventKind, TaskId};

use crate::conn::ConnShared;
use crate::hub::{error, FinishedSession, Hub, SessionEntry};
use crate::metrics::SessionMetrics;

pub(crate) enum SessionMsg {
    Attach {
        conn: Arc<ConnShared>,
        role: Role,
        reply: oneshot::Sender<Result<(), Body>>,
    },
    Inbound {
        conn: ConnId,
        msg: WireMessage,
    },
    Detach {
        conn: ConnId,
    },
    /// Server shutdown: end the session as if the operator left.
    Shutdown,
}

/// Creates a session in the lobby phase and starts its task.
pub(crate) fn spawn_session(hub: &Arc<Hub>, operator: PlayerId, task: &TaskId, seed: u64) -> Result<SessionId, Body> {
    let spec = hub
        .catalog
        .get(task)
        .map_err(|e| error(ErrorCode::UnknownTask, e.to_string()))?;
    let config = SessionConfig {
        countdown_s: hub.config.server.countdown_s,
    };
    let session = SessionState::new(
        SessionId::random(),
        operator.clone(),
        Arc::new(spec.clone()),
        hub.arm.clone(),
        seed,
        config,
    )
    .map_err(|e| error(ErrorCode::Internal, e.to_string()))?;
    let id = session.session_id;
    let (tx, rx) = unbounded_channel();
    let metrics = Arc::new(Mutex::new(SessionMetrics::default()));
    hub.sessions.lock().expect("sessions lock").insert(
        id,
        SessionEntry {
            tx,
            operator,
            task: task.clone(),
        },
    );
    hub.live_metrics.lock().expect("metrics lock").insert(id, metrics.clone());
    let live = Live {
        hub: hub.clone(),
        recorder: EpisodeRecorder::new(hub.config.episodes_dir(), DEFAULT_DT),
        fanout: Fanout::new(hub.config.fanout()),
        session,
        conns: HashMap::new(),
        pending_inputs: Vec::new(),
        pending_events: Vec::new(),
        operator_left: Some(Instant::now()),
        metrics,
        started: Instant::now(),
        summary: None,
    };
    tokio::spawn(live.run(rx));
    log::info!("session {id} created for task {task} seed {seed}");
    Ok(id)
}

struct Live {
    hub: Arc<Hub>,
    session: SessionState,
    fanout: Fanout,
    conns: HashMap<ConnId, Arc<ConnShared>>,
    recorder: EpisodeRecorder,
    pending_inputs: Vec<OperatorInput>,
    pending_events: Vec<GameEvent>,
    /// When the operator slot became empty.
    operator_left: Option<Instant>,
    metrics: Arc<Mutex<SessionMetrics>>,
    started: Instant,
    summary: Option<SessionSummary>,
}

impl Live {
    async fn run(mut self, mut rx: UnboundedReceiver<SessionMsg>) {
        let mut interval = tokio::time::interval(Duration::from_secs_f64(DEFAULT_DT));
        interval.set_missed_tick_behavior(MissedTickBehavior::Burst);
        while self.summary.is_none() {
            tokio::select! {
                msg = rx.recv() => match msg {
                    Some(msg) => self.on_msg(msg),
                    None => self.end(),
                },
                _ = interval.tick() => self.on_tick(),
            }
        }
        let id = self.session.session_id;
        self.hub.sessions.lock().expect("sessions lock").remove(&id);
        self.hub.live_metrics.lock().expect("metrics lock").remove(&id);
        let metrics = self.metrics.lock().expect("metrics lock").clone();
        self.hub.finished.lock().expect("finished lock").insert(
            id,
            FinishedSession {
                summary: self.summary.take().expect("loop exits with a summary"),
                episodes: self.recorder.written().to_vec(),
                metrics,
            },
        );
        for conn in self.conns.values() {
            conn.close();
        }
        // Attach requests that raced the shutdown get an answer.
        rx.close();
        while let Ok(msg) = rx.try_recv() {
            if let SessionMsg::Attach { reply, .. } = msg {
                let _ = reply.send(Err(error(ErrorCode::SessionNotFound, format!("session {id} has ended"))));
            }
        }
        log::info!("session {id} ended");
    }

    fn on_msg(&mut self, msg: SessionMsg) {
        match msg {
            SessionMsg::Attach { conn, role, reply } => {
                let _ = reply.send(self.attach(conn, role));
            }
            SessionMsg::Inbound { conn, msg } => self.inbound(conn, msg),
            SessionMsg::Detach { conn } => self.detach(conn),
            SessionMsg::Shutdown => self.end(),
        }
    }

    fn attach(&mut self, conn: Arc<ConnShared>, role: Role) -> Result<(), Body> {
        match role {
            Role::Operator if self.fanout.operator().is_some() => {
                return Err(error(ErrorCode::OperatorSlotTaken, "the operator slot is taken"))
            }
            Role::Spectator if self.fanout.spectators().len() >= self.hub.config.server.max_spectators => {
                return Err(error(
                    ErrorCode::SpectatorLimit,
                    format!("spectator limit of {} reached", self.hub.config.server.max_spectators),
                ))
            }
            _ => {}
        }
        let id = self.session.session_id;
        let accepted = Join::Accepted {
            session: id,
            task: self.session.task.clone(),
            role,
            spectator_path: format!("/session/{}?role=spectator", id.to_hex()),
        };
        conn.push(match role {
            Role::Operator => Body::JoinOperator(accepted),
            Role::Spectator => Body::JoinSpectator(accepted),
        });
        self.fanout
            .attach_outbox(conn.id, role, &self.session, conn.outbox.clone(), conn.waker())
            .map_err(|e| error(ErrorCode::Internal, e.to_string()))?;
        match role {
            Role::Operator => self.operator_left = None,
            Role::Spectator => {
                self.session.spectators.insert(conn.id);
            }
        }
        self.conns.insert(conn.id, conn);
        Ok(())
    }

    fn detach(&mut self, conn: ConnId) {
        self.conns.remove(&conn);
        self.session.spectators.remove(&conn);
        if self.fanout.detach(conn) == Some(Role::Operator) {
            self.operator_left = Some(Instant::now());
        }
    }

    fn inbound(&mut self, conn: ConnId, msg: WireMessage) {
        let Some(role) = self.fanout.role(conn) else { return };
        match handle_inbound(&mut self.session, role, &msg, &mut self.pending_inputs) {
            Ok(applied) => {
                self.absorb(applied.events);
                if let Some(summary) = applied.summary {
                    self.conclude(summary);
                }
            }
            Err(Common::Hello(h)) => {
                self.fanout.send_to(conn, self.hub.hello(&h));
            }
            Err(Common::Leaderboard { top }) => {
                self.fanout.send_to(conn, self.hub.leaderboard(top));
            }
            Err(Common::Reject { code, message }) => {
                self.fanout.send_to(conn, error(code, message));
            }
        }
        // next_attempt past the last attempt ends the session.
        if self.session.phase == Phase::Ended && self.summary.is_none() {
            let summary = self.session.end_session();
            self.conclude(summary);
        }
    }

    /// Queues events for the next broadcast, writing an episode for each
    /// finished attempt.
    fn absorb(&mut self, events: impl IntoIterator<Item = GameEvent>) {
        for e in events {
            let ended = matches!(e.kind, GameEventKind::AttemptEnd { .. });
            let t = e.t;
            self.pending_events.push(e);
            if ended {
                match self.recorder.finish_attempt(&self.session) {
                    Ok(dir) => log::info!("episode written to {}", dir.display()),
                    Err(err) => {
                        log::warn!("episode not recorded: {err}");
                        self.pending_events.push(err.warning(t));
                    }
                }
            }
        }
    }

    fn on_tick(&mut self) {
        let grace = Duration::from_secs_f64(self.hub.config.server.disconnect_grace_s);
        if self.operator_left.is_some_and(|t| t.elapsed() >= grace) {
            log::info!("operator of {} did not return; ending", self.session.session_id);
            return self.end();
        }
        let inputs = std::mem::take(&mut self.pending_inputs);
        let (events, transitions) = self.session.tick(&inputs, DEFAULT_DT);
        let now = self.started.elapsed().as_secs_f64();
        let recorded = transitions.len();
        self.recorder.push(transitions);
        self.absorb(events);
        let budget = self.hub.config.server.cloud_budget;
        let cloud = self
            .fanout
            .cloud_due()
            .then(|| capture_cloud(&self.session, 0, budget));
        let events = std::mem::take(&mut self.pending_events);
        let report = self.fanout.broadcast_tick(&self.session, &events, cloud);
        {
            let mut m = self.metrics.lock().expect("metrics lock");
            m.tick_times.push(now);
            m.record_times.extend(std::iter::repeat_n(now, recorded));
            if report.sent_state {
                m.state_times.push(now);
            }
        }
        for id in report.overflowed {
            if let Some(conn) = self.conns.get(&id).cloned() {
                conn.close();
            }
            self.detach(id);
        }
        if self.session.phase == Phase::BetweenAttempts && !self.session.has_attempts_left() {
            let summary = self.session.end_session();
            self.conclude(summary);
        }
    }

    /// Abandons any attempt in progress and ends the session.
    fn end(&mut self) {
        if self.summary.is_some() {
            return;
        }
        let abandoned = self.session.abandon_attempt();
        self.absorb(abandoned);
        let summary = self.session.end_session();
        self.conclude(summary);
    }

    /// Sends the final events, the summary and a closing keyframe.
    fn conclude(&mut self, summary: SessionSummary) {
        for e in std::mem::take(&mut self.pending_events) {
            self.fanout.broadcast(&Body::Event(e));
        }
        let (unlocked, profile) = self.hub.apply_summary(&summary);
        self.fanout.broadcast(&Body::SessionEnd(SessionEnd::Summary {
            summary: summary.clone(),
            unlocked,
            profile,
        }));
        let spectators = self.fanout.spectators().len() as u32;
        let last = capture_state(&self.session, self.fanout.tick() + 1, true, spectators);
        self.fanout.broadcast(&Body::StateUpdate(Box::new(last)));
        self.summary = Some(summary);
    }
}
