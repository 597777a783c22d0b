//! Deterministic simulated-network run of one scripted session.
//!
//! The session, fan-out and per-connection [`Link`]s advance in lockstep on
//! a virtual clock, so a run is reproducible from its seeds. Operator
//! inputs cross a link of their own before reaching the session.

use std::sync::Arc;

use crate::arm::ArmConfig;
use crate::progression::PlayerId;
use crate::script::{Script, ScriptPlayer};
use crate::session::{OperatorInput, Phase, SessionConfig, SessionId, SessionState, SessionSummary};
use crate::task::{GameEvent, TaskSpec};

use super::fanout::{capture_cloud, capture_state, ConnId, Fanout, FanoutConfig, SharedOutbox};
use super::netsim::{LatencyModel, Link};
use super::wire::{decode, encode, Body, Role, SessionEnd, StateUpdate, WireMessage};

#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub operator: LatencyModel,
    /// One entry per spectator.
    pub spectators: Vec<LatencyModel>,
    /// Server tick at which each spectator joins; missing entries join at 0.
    pub join_ticks: Vec<u64>,
    pub dt: f64,
    pub session_id: SessionId,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            operator: LatencyModel::NONE,
            spectators: Vec::new(),
            join_ticks: Vec::new(),
            dt: crate::session::DEFAULT_DT,
            session_id: SessionId([0x5a; 16]),
        }
    }
}

/// What one connection received, decoded from the encoded frames.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub states: Vec<StateUpdate>,
    pub events: Vec<GameEvent>,
    pub summary: Option<SessionSummary>,
    pub dropped: u64,
    pub frames: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct HarnessReport {
    /// Every state issued by the server, keyframe flag cleared.
    pub issued_states: Vec<StateUpdate>,
    pub events: Vec<GameEvent>,
    /// Authoritative event count when each spectator joined.
    pub join_event_index: Vec<usize>,
    pub final_state: StateUpdate,
    pub summary: SessionSummary,
    pub operator: Trace,
    pub spectators: Vec<Trace>,
    pub ticks: u64,
}

fn normalized(s: &StateUpdate) -> StateUpdate {
    StateUpdate {
        keyframe: false,
        ..s.clone()
    }
}

impl HarnessReport {
    /// Delivered states form an order-preserving subsequence of the issued ones.
    pub fn prefix_consistent(&self, trace: &Trace) -> bool {
        let mut issued = self.issued_states.iter();
        trace
            .states
            .iter()
            .all(|d| issued.any(|s| *s == normalized(d)))
    }

    pub fn final_state_matches(&self, trace: &Trace) -> bool {
        trace.states.last().map(normalized) == Some(normalized(&self.final_state))
    }

    /// Every event since the connection joined, in order, nothing missing.
    pub fn events_complete(&self, trace: &Trace, joined_at: usize) -> bool {
        trace.events == self.events[joined_at..]
    }

    pub fn spectator_ok(&self, i: usize) -> bool {
        let t = &self.spectators[i];
        self.prefix_consistent(t)
            && self.final_state_matches(t)
            && self.events_complete(t, self.join_event_index[i])
            && t.summary.as_ref() == Some(&self.summary)
    }
}

struct Endpoint {
    outbox: SharedOutbox,
    link: Link<WireMessage>,
    trace: Trace,
}

impl Endpoint {
    fn pump(&mut self, now_ms: f64) {
        let drained = self.outbox.lock().expect("outbox lock poisoned").drain();
        for msg in drained {
            let droppable = matches!(&msg.body, Body::StateUpdate(s) if !s.keyframe);
            if !self.link.send(now_ms, msg, droppable) {
                self.trace.dropped += 1;
            }
        }
        for msg in self.link.poll(now_ms) {
            // Round-trip through the codec so the trace is what a client decodes.
            let frame = encode(&msg);
            self.trace.frames += 1;
            self.trace.bytes += frame.len() as u64;
            match decode(&frame).expect("server frames decode").body {
                Body::StateUpdate(s) => self.trace.states.push(*s),
                Body::Event(e) => self.trace.events.push(e),
                Body::SessionEnd(SessionEnd::Summary { summary, .. }) => self.trace.summary = Some(summary),
                _ => {}
            }
        }
    }
}

/// Plays `script` for one attempt, ends the session and flushes every link.
pub fn run(spec: Arc<TaskSpec>, arm: Arc<ArmConfig>, script: &Script, config: &HarnessConfig) -> HarnessReport {
    let dt = config.dt;
    let mut session = SessionState::new(
        config.session_id,
        PlayerId::new("harness"),
        spec,
        arm,
        script.seed,
        SessionConfig { countdown_s: 0.0 },
    )
    .expect("script task has a valid scene");
    let mut fanout = Fanout::new(FanoutConfig {
        max_spectators: config.spectators.len().max(1),
        ..FanoutConfig::default()
    });
    let noop: super::fanout::Waker = Arc::new(|| {});

    let attach = |fanout: &mut Fanout, session: &SessionState, id: ConnId, role: Role, model: LatencyModel| {
        let outbox = fanout.attach(id, role, session, noop.clone()).expect("harness stays within limits");
        Endpoint {
            outbox,
            link: Link::new(model),
            trace: Trace::default(),
        }
    };

    let mut issued = Vec::new();
    let mut events: Vec<GameEvent> = Vec::new();
    let mut operator = attach(&mut fanout, &session, 0, Role::Operator, LatencyModel::NONE);
    issued.push(capture_state(&session, 0, false, 0));
    let mut spectators: Vec<Option<Endpoint>> = config.spectators.iter().map(|_| None).collect();
    let mut join_event_index = vec![0; spectators.len()];

    let mut input_link: Link<OperatorInput> = Link::new(config.operator);
    let mut player = ScriptPlayer::new(script);
    let start_events = session.start().expect("fresh session is in the lobby");
    let mut pending_events = start_events;
    let mut tick: u64 = 0;
    let now = |tick: u64| tick as f64 * dt * 1000.0;

    loop {
        for (i, slot) in spectators.iter_mut().enumerate() {
            if slot.is_none() && config.join_ticks.get(i).copied().unwrap_or(0) <= tick {
                join_event_index[i] = events.len();
                let ep = attach(&mut fanout, &session, i as ConnId + 1, Role::Spectator, config.spectators[i]);
                issued.push(capture_state(&session, fanout.tick(), false, fanout.spectators().len() as u32));
                *slot = Some(ep);
            }
        }
        if session.phase != Phase::Playing {
            break;
        }
        if script.disconnect_at.is_some_and(|t| session.clock + 1e-9 >= t) {
            pending_events.extend(session.abandon_attempt());
            break;
        }
        if let Some(input) = player.due(session.clock) {
            input_link.send(now(tick), input, false);
        }
        let inputs = input_link.poll(now(tick));
        let (ev, _) = session.tick(&inputs, dt);
        pending_events.extend(ev);
        let cloud = fanout
            .cloud_due()
            .then(|| capture_cloud(&session, 0, super::fanout::DEFAULT_CLOUD_BUDGET / 4));
        let report = fanout.broadcast_tick(&session, &pending_events, cloud);
        if report.sent_state {
            issued.push(capture_state(&session, fanout.tick(), false, fanout.spectators().len() as u32));
        }
        events.append(&mut pending_events);
        tick += 1;
        operator.pump(now(tick));
        for ep in spectators.iter_mut().flatten() {
            ep.pump(now(tick));
        }
    }

    if !pending_events.is_empty() {
        if fanout.broadcast_tick(&session, &pending_events, None).sent_state {
            issued.push(capture_state(&session, fanout.tick(), false, fanout.spectators().len() as u32));
        }
        events.append(&mut pending_events);
    }
    let summary = session.end_session();
    let final_state = capture_state(&session, fanout.tick() + 1, true, fanout.spectators().len() as u32);
    issued.push(normalized(&final_state));
    fanout.broadcast(&Body::SessionEnd(SessionEnd::Summary {
        summary: summary.clone(),
        unlocked: Vec::new(),
        profile: None,
    }));
    fanout.broadcast(&Body::StateUpdate(Box::new(final_state.clone())));

    let end = now(tick);
    operator.pump(end);
    for ep in spectators.iter_mut().flatten() {
        ep.pump(end);
        ep.pump(f64::INFINITY);
    }
    operator.pump(f64::INFINITY);

    HarnessReport {
        issued_states: issued,
        events,
        join_event_index,
        final_state,
        summary,
        operator: operator.trace,
        spectators: spectators.into_iter().map(|e| e.map(|e| e.trace).unwrap_or_default()).collect(),
        ticks: tick,
    }
}
