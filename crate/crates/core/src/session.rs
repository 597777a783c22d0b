//! The per-session game loop.
//!
//! A session walks `lobby → countdown → playing → between_attempts → … →
//! ended`. While playing, every tick applies the newest operator input
//! through the safety clamp, advances the arm and scene, evaluates the task
//! stages and, every 1/12 s of simulated time, emits a recorded transition.
//! All of it is deterministic: the same seed, input log and dt schedule
//! reproduce the same trajectory bit for bit.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{clamp_command, step, ArmConfig, ArmState, JointVector};
use crate::dataset::{Action, AppliedInput, Observation, Transition, RECORD_HZ};
use crate::progression::PlayerId;
use crate::scene::{push_lid, randomize_scene, release, try_grasp, SceneError, SceneState};
use crate::task::{
    evaluate_stages, score_attempt, AttemptOutcome, AttemptProgress, GameEvent, GameEventKind, StageResult,
    TaskCatalog, TaskError, TaskId, TaskSpec, TIME_WARNING_FRACTION,
};

/// Default simulation step.
pub const DEFAULT_DT: f64 = 1.0 / 60.0;
pub const DEFAULT_COUNTDOWN_S: f64 = 3.0;
pub const DEFAULT_DISCONNECT_GRACE_S: f64 = 5.0;

/// Slack for comparing accumulated clock values against cadence boundaries.
const CLOCK_EPS: f64 = 1e-9;

/// 128-bit unguessable session token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct SessionId(pub [u8; 16]);

impl SessionId {
    pub fn random() -> Self {
        let mut b = [0u8; 16];
        rand::rng().fill_bytes(&mut b);
        SessionId(b)
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s.len() != 32 || !s.is_ascii() {
            return None;
        }
        let mut b = [0u8; 16];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hex = std::str::from_utf8(chunk).ok()?;
            b[i] = u8::from_str_radix(hex, 16).ok()?;
        }
        Some(SessionId(b))
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl From<SessionId> for String {
    fn from(s: SessionId) -> String {
        s.to_hex()
    }
}

impl TryFrom<String> for SessionId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        SessionId::parse(&s).ok_or_else(|| format!("invalid session id {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Lobby,
    Countdown,
    Playing,
    BetweenAttempts,
    Ended,
}

/// One operator command as received from the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorInput {
    pub seq: u64,
    pub target_q: JointVector,
    pub gripper_closed: bool,
    /// Client clock, milliseconds; informational only.
    pub client_timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub countdown_s: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            countdown_s: DEFAULT_COUNTDOWN_S,
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    UnknownTask(#[from] TaskError),
    #[error("unknown player {0}")]
    UnknownPlayer(PlayerId),
    #[error("operation requires phase {expected:?}, session is {actual:?}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("all {0} attempts used")]
    AttemptsExhausted(u32),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Lookup of registered players.
pub trait PlayerDirectory {
    fn contains(&self, player: &PlayerId) -> bool;
}

impl PlayerDirectory for BTreeSet<PlayerId> {
    fn contains(&self, player: &PlayerId) -> bool {
        BTreeSet::contains(self, player)
    }
}

/// Result of one finished (or abandoned) attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptSummary {
    pub attempt_index: u32,
    #[serde(with = "crate::u64_text")]
    pub seed: u64,
    pub outcome: AttemptOutcome,
    pub stage_results: Vec<StageResult>,
    pub points: u64,
    pub duration: f64,
    pub episode_id: String,
    pub final_scene_hash: String,
}

impl AttemptSummary {
    pub fn success(&self) -> bool {
        self.outcome == AttemptOutcome::Success
    }
}

/// Everything the progression system needs from a finished session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    /// Unique per session; used to make summary application idempotent.
    pub summary_id: String,
    pub player: PlayerId,
    pub task: TaskId,
    pub attempts: Vec<AttemptSummary>,
    pub total_points: u64,
    /// Attempt index of the best attempt, if any attempt was played.
    pub best_attempt: Option<u32>,
}

impl SessionSummary {
    pub fn episode_ids(&self) -> impl Iterator<Item = &str> {
        self.attempts.iter().map(|a| a.episode_id.as_str())
    }

    pub fn any_success(&self) -> bool {
        self.attempts.iter().any(AttemptSummary::success)
    }
}

/// The live state of a session. Owned by exactly one writer.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub session_id: SessionId,
    pub phase: Phase,
    pub task: TaskId,
    pub attempt_index: u32,
    /// Seconds since the current attempt started.
    pub clock: f64,
    pub countdown_remaining: f64,
    pub arm: ArmState,
    pub scene: SceneState,
    pub progress: AttemptProgress,
    pub operator: PlayerId,
    pub spectators: BTreeSet<u64>,
    pub score_so_far: u64,
    /// Inputs discarded for stale sequence numbers.
    pub dropped_inputs: u64,

    spec: Arc<TaskSpec>,
    arm_config: Arc<ArmConfig>,
    config: SessionConfig,
    base_seed: u64,
    attempt_seed: u64,
    last_seq: Option<u64>,
    held: (JointVector, bool),
    prev_gripper_closed: bool,
    warned: bool,
    next_record: u64,
    attempt_ticks: u64,
    input_log: Vec<AppliedInput>,
    attempts: Vec<AttemptSummary>,
}

/// Per-attempt seed: attempt 1 uses the session seed, later attempts mix in the index.
pub fn derive_attempt_seed(base: u64, attempt: u32) -> u64 {
    if attempt <= 1 {
        return base;
    }
    // splitmix64 finalizer
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(attempt as u64));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn episode_id(session: &SessionId, attempt: u32) -> String {
    format!("{}-{attempt:02}", session.to_hex())
}

/// Creates a session in the lobby with a freshly randomized scene.
pub fn create_session(
    player: &PlayerId,
    task: &TaskId,
    seed: u64,
    catalog: &TaskCatalog,
    players: &dyn PlayerDirectory,
    arm_config: Arc<ArmConfig>,
    config: SessionConfig,
) -> Result<SessionState, SessionError> {
    let spec = catalog.get(task)?;
    if !players.contains(player) {
        return Err(SessionError::UnknownPlayer(player.clone()));
    }
    SessionState::new(SessionId::random(), player.clone(), Arc::new(spec.clone()), arm_config, seed, config)
}

impl SessionState {
    /// Builds a session with a caller-chosen id, for replay and tests.
    pub fn new(
        session_id: SessionId,
        operator: PlayerId,
        spec: Arc<TaskSpec>,
        arm_config: Arc<ArmConfig>,
        seed: u64,
        config: SessionConfig,
    ) -> Result<Self, SessionError> {
        let scene = randomize_scene(&spec.randomization, seed)?;
        let arm = arm_config.home_state();
        Ok(Self {
            session_id,
            phase: Phase::Lobby,
            task: spec.id.clone(),
            attempt_index: 1,
            clock: 0.0,
            countdown_remaining: config.countdown_s,
            held: (*arm.q(), false),
            arm,
            scene,
            progress: AttemptProgress::new(&spec),
            operator,
            spectators: BTreeSet::new(),
            score_so_far: 0,
            dropped_inputs: 0,
            spec,
            arm_config,
            config,
            base_seed: seed,
            attempt_seed: seed,
            last_seq: None,
            prev_gripper_closed: false,
            warned: false,
            next_record: 0,
            attempt_ticks: 0,
            input_log: Vec::new(),
            attempts: Vec::new(),
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn arm_config(&self) -> &ArmConfig {
        &self.arm_config
    }

    pub fn attempt_seed(&self) -> u64 {
        self.attempt_seed
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn time_limit(&self) -> f64 {
        self.spec.time_limit
    }

    /// Inputs applied so far in the current attempt.
    pub fn input_log(&self) -> &[AppliedInput] {
        &self.input_log
    }

    /// Attempts finished so far.
    pub fn attempts(&self) -> &[AttemptSummary] {
        &self.attempts
    }

    /// Ticks simulated in the current attempt.
    pub fn attempt_ticks(&self) -> u64 {
        self.attempt_ticks
    }

    pub fn current_episode_id(&self) -> String {
        episode_id(&self.session_id, self.attempt_index)
    }

    /// Leaves the lobby. With a zero countdown the attempt starts at once.
    pub fn start(&mut self) -> Result<Vec<GameEvent>, SessionError> {
        if self.phase != Phase::Lobby {
            return Err(SessionError::WrongPhase {
                expected: Phase::Lobby,
                actual: self.phase,
            });
        }
        self.phase = Phase::Countdown;
        self.countdown_remaining = self.config.countdown_s;
        Ok(self.maybe_begin_playing())
    }

    fn maybe_begin_playing(&mut self) -> Vec<GameEvent> {
        if self.phase == Phase::Countdown && self.countdown_remaining <= CLOCK_EPS {
            self.phase = Phase::Playing;
            self.clock = 0.0;
            return vec![GameEvent::new(
                0.0,
                GameEventKind::AttemptStart {
                    attempt: self.attempt_index,
                },
            )];
        }
        Vec::new()
    }

    fn observation(&self) -> Observation {
        Observation {
            q: *self.arm.q(),
            gripper_aperture: self.arm.gripper().aperture,
            ee_pose: *self.arm.ee_pose(),
            object_poses: self.scene.objects.iter().map(|o| o.pose).collect(),
        }
    }

    /// Accepts the newest input with a fresh sequence number; older or
    /// repeated sequence numbers are dropped and counted.
    fn absorb_inputs(&mut self, pending: &[OperatorInput]) {
        let mut newest = None;
        for input in pending {
            if self.last_seq.is_some_and(|last| input.seq <= last) {
                self.dropped_inputs += 1;
                continue;
            }
            self.last_seq = Some(input.seq);
            newest = Some(*input);
        }
        if let Some(input) = newest {
            self.apply_input(input.target_q, input.gripper_closed);
        }
    }

    fn apply_input(&mut self, target_q: JointVector, gripper_closed: bool) {
        let next = (target_q, gripper_closed);
        // Compare bit patterns so NaN targets are logged like any other change.
        let same = self.held.1 == next.1
            && self.held.0 .0.iter().zip(&next.0 .0).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            self.input_log.push(AppliedInput {
                tick: self.attempt_ticks,
                target_q,
                gripper_closed,
            });
        }
        self.held = next;
    }

    /// Applies an already-coalesced input exactly as the live loop did.
    pub fn apply_logged_input(&mut self, input: &AppliedInput) {
        self.apply_input(input.target_q, input.gripper_closed);
    }

    /// Advances the session by `dt` seconds.
    ///
    /// Returns the HUD events raised during the tick and any transitions
    /// recorded for the dataset. Only the countdown and playing phases
    /// advance; other phases return nothing.
    pub fn tick(&mut self, pending: &[OperatorInput], dt: f64) -> (Vec<GameEvent>, Vec<Transition>) {
        match self.phase {
            Phase::Countdown => {
                self.countdown_remaining -= dt;
                (self.maybe_begin_playing(), Vec::new())
            }
            Phase::Playing => {
                self.absorb_inputs(pending);
                self.simulate(dt)
            }
            _ => (Vec::new(), Vec::new()),
        }
    }

    /// One playing tick with whatever input is currently held.
    pub fn simulate(&mut self, dt: f64) -> (Vec<GameEvent>, Vec<Transition>) {
        debug_assert_eq!(self.phase, Phase::Playing);
        let mut transitions = Vec::new();
        let mut events = Vec::new();
        let (target, gripper_closed) = self.held;
        let cfg = Arc::clone(&self.arm_config);

        let cmd = clamp_command(&self.arm, &target, &cfg.safety, &cfg.chain);
        if self.clock + CLOCK_EPS >= self.next_record as f64 / RECORD_HZ {
            transitions.push(Transition {
                t: self.clock,
                observation: self.observation(),
                action: Action {
                    target_q: cmd,
                    gripper_closed,
                },
            });
            self.next_record += 1;
        }

        let prev_ee = self.arm.ee_pose().position;
        self.arm = step(&cfg.chain, &self.arm, &cmd, gripper_closed, dt);
        self.clock += dt;
        self.attempt_ticks += 1;
        let ee = *self.arm.ee_pose();

        self.scene.carry(&ee);
        if gripper_closed && !self.prev_gripper_closed {
            let (scene, grasped) = try_grasp(&self.scene, &ee, true);
            self.scene = scene;
            if let Some(object) = grasped {
                events.push(GameEvent::new(self.clock, GameEventKind::GraspHighlight { object }));
            }
        } else if !gripper_closed && self.prev_gripper_closed {
            self.scene = release(&self.scene, &ee);
        }
        self.prev_gripper_closed = gripper_closed;
        self.scene = push_lid(&self.scene, &prev_ee, &ee.position);

        let (progress, stage_events) = evaluate_stages(&self.spec, &self.scene, &self.arm, &self.progress, self.clock);
        self.progress = progress;
        events.extend(stage_events);

        let limit = self.spec.time_limit;
        if !self.warned && self.clock + CLOCK_EPS >= TIME_WARNING_FRACTION * limit {
            self.warned = true;
            events.push(GameEvent::new(
                self.clock,
                GameEventKind::TimeWarning {
                    remaining: (limit - self.clock).max(0.0),
                },
            ));
        }

        if self.progress.complete() {
            events.push(self.finish_attempt(AttemptOutcome::Success));
        } else if self.clock + CLOCK_EPS >= limit {
            self.clock = limit;
            events.push(GameEvent::new(self.clock, GameEventKind::Timeout));
            events.push(self.finish_attempt(AttemptOutcome::Timeout));
        }
        (events, transitions)
    }

    fn finish_attempt(&mut self, outcome: AttemptOutcome) -> GameEvent {
        let points = score_attempt(&self.spec, &self.progress.stages);
        self.score_so_far += points;
        self.attempts.push(AttemptSummary {
            attempt_index: self.attempt_index,
            seed: self.attempt_seed,
            outcome: outcome.clone(),
            stage_results: self.progress.stages.clone(),
            points,
            duration: self.clock,
            episode_id: self.current_episode_id(),
            final_scene_hash: self.scene.hash_hex(),
        });
        self.phase = Phase::BetweenAttempts;
        GameEvent::new(
            self.clock,
            GameEventKind::AttemptEnd {
                attempt: self.attempt_index,
                outcome,
                points,
            },
        )
    }

    /// Whether another attempt may be started.
    pub fn has_attempts_left(&self) -> bool {
        self.attempt_index < self.spec.max_attempts
    }

    /// Starts the next attempt, re-randomizing the scene unless `reuse_seed`.
    ///
    /// When every attempt is used the session moves to `ended` and
    /// [`SessionError::AttemptsExhausted`] is returned.
    pub fn next_attempt(&mut self, reuse_seed: bool) -> Result<Vec<GameEvent>, SessionError> {
        if self.phase != Phase::BetweenAttempts {
            return Err(SessionError::WrongPhase {
                expected: Phase::BetweenAttempts,
                actual: self.phase,
            });
        }
        if !self.has_attempts_left() {
            self.phase = Phase::Ended;
            return Err(SessionError::AttemptsExhausted(self.spec.max_attempts));
        }
        let index = self.attempt_index + 1;
        let seed = if reuse_seed {
            self.attempt_seed
        } else {
            derive_attempt_seed(self.base_seed, index)
        };
        self.scene = randomize_scene(&self.spec.randomization, seed)?;
        self.attempt_index = index;
        self.attempt_seed = seed;
        self.arm = self.arm_config.home_state();
        self.held = (*self.arm.q(), false);
        self.prev_gripper_closed = false;
        self.progress = AttemptProgress::new(&self.spec);
        self.clock = 0.0;
        self.warned = false;
        self.next_record = 0;
        self.attempt_ticks = 0;
        self.input_log.clear();
        self.phase = Phase::Countdown;
        self.countdown_remaining = self.config.countdown_s;
        Ok(self.maybe_begin_playing())
    }

    /// Marks an attempt in progress as abandoned, e.g. after the operator
    /// disconnected. Returns the attempt_end event if one was emitted.
    pub fn abandon_attempt(&mut self) -> Option<GameEvent> {
        if self.phase == Phase::Playing {
            Some(self.finish_attempt(AttemptOutcome::Incomplete))
        } else {
            None
        }
    }

    /// Closes the session and summarizes it for progression.
    pub fn end_session(&mut self) -> SessionSummary {
        self.abandon_attempt();
        self.phase = Phase::Ended;
        let total_points = self.attempts.iter().map(|a| a.points).sum();
        let best_attempt = self
            .attempts
            .iter()
            .max_by(|a, b| {
                (a.success(), a.points)
                    .cmp(&(b.success(), b.points))
                    .then(b.attempt_index.cmp(&a.attempt_index))
            })
            .map(|a| a.attempt_index);
        SessionSummary {
            summary_id: self.session_id.to_hex(),
            player: self.operator.clone(),
            task: self.task.clone(),
            attempts: self.attempts.clone(),
            total_points,
            best_attempt,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (TaskCatalog, Arc<ArmConfig>, BTreeSet<PlayerId>) {
        let mut players = BTreeSet::new();
        players.insert(PlayerId::new("p1"));
        (TaskCatalog::builtin(), Arc::new(ArmConfig::builtin()), players)
    }

    fn playing(task: &str, seed: u64) -> SessionState {
        let (catalog, arm, players) = setup();
        let mut s = create_session(
            &PlayerId::new("p1"),
            &TaskId::from(task),
            seed,
            &catalog,
            &players,
            arm,
            SessionConfig { countdown_s: 0.0 },
        )
        .unwrap();
        let ev = s.start().unwrap();
        assert!(matches!(ev[0].kind, GameEventKind::AttemptStart { attempt: 1 }));
        s
    }

    #[test]
    fn session_ids_are_distinct_and_hex() {
        let (catalog, arm, players) = setup();
        let make = || {
            create_session(
                &PlayerId::new("p1"),
                &TaskId::from("AnimalDorms"),
                1,
                &catalog,
                &players,
                arm.clone(),
                SessionConfig::default(),
            )
            .unwrap()
        };
        let (a, b) = (make(), make());
        assert_ne!(a.session_id, b.session_id);
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.phase, Phase::Lobby);
        assert_eq!(SessionId::parse(&a.session_id.to_hex()), Some(a.session_id));
    }

    #[test]
    fn unknown_task_and_player() {
        let (catalog, arm, players) = setup();
        let err = create_session(
            &PlayerId::new("p1"),
            &TaskId::from("Nope"),
            1,
            &catalog,
            &players,
            arm.clone(),
            SessionConfig::default(),
        );
        assert!(matches!(err, Err(SessionError::UnknownTask(_))));
        let err = create_session(
            &PlayerId::new("ghost"),
            &TaskId::from("PackBox"),
            1,
            &catalog,
            &players,
            arm,
            SessionConfig::default(),
        );
        assert!(matches!(err, Err(SessionError::UnknownPlayer(_))));
    }

    #[test]
    fn idle_tick_holds_arm_and_advances_clock() {
        let mut s = playing("AnimalDorms", 3);
        let q0 = *s.arm.q();
        let (_, tr) = s.tick(&[], DEFAULT_DT);
        assert_eq!(tr.len(), 1);
        assert_eq!(*s.arm.q(), q0);
        assert!((s.clock - DEFAULT_DT).abs() < 1e-15);
    }

    #[test]
    fn countdown_precedes_play() {
        let (catalog, arm, players) = setup();
        let mut s = create_session(
            &PlayerId::new("p1"),
            &TaskId::from("AnimalDorms"),
            1,
            &catalog,
            &players,
            arm,
            SessionConfig::default(),
        )
        .unwrap();
        assert!(s.start().unwrap().is_empty());
        let mut started = false;
        for _ in 0..180 {
            let (ev, _) = s.tick(&[], DEFAULT_DT);
            started |= ev.iter().any(|e| matches!(e.kind, GameEventKind::AttemptStart { .. }));
        }
        assert!(started);
        assert_eq!(s.phase, Phase::Playing);
    }

    #[test]
    fn timeout_ends_attempt() {
        let mut s = playing("AnimalDorms", 3);
        let mut all = Vec::new();
        let mut transitions = 0;
        while s.phase == Phase::Playing {
            let (ev, tr) = s.tick(&[], DEFAULT_DT);
            all.extend(ev);
            transitions += tr.len();
        }
        assert_eq!(s.phase, Phase::BetweenAttempts);
        assert_eq!(s.clock, 90.0);
        assert_eq!(transitions, 90 * 12);
        let kinds: Vec<_> = all.iter().map(|e| &e.kind).collect();
        assert!(matches!(kinds[kinds.len() - 2], GameEventKind::Timeout));
        assert!(matches!(
            kinds[kinds.len() - 1],
            GameEventKind::AttemptEnd {
                outcome: AttemptOutcome::Timeout,
                ..
            }
        ));
        assert_eq!(
            all.iter().filter(|e| matches!(e.kind, GameEventKind::TimeWarning { .. })).count(),
            1
        );
        assert!(all.windows(2).all(|w| w[0].t <= w[1].t));
    }

    #[test]
    fn stale_inputs_are_dropped() {
        let mut s = playing("AnimalDorms", 3);
        let mut q = *s.arm.q();
        q.0[0] += 0.01;
        let fresh = OperatorInput {
            seq: 5,
            target_q: q,
            gripper_closed: false,
            client_timestamp: 0,
        };
        s.tick(&[fresh], DEFAULT_DT);
        let mut stale = fresh;
        stale.seq = 5;
        stale.target_q.0[0] += 0.02;
        let mut older = stale;
        older.seq = 2;
        s.tick(&[stale, older], DEFAULT_DT);
        assert_eq!(s.dropped_inputs, 2);
        assert_eq!(*s.arm.q(), q);
    }

    #[test]
    fn attempts_cycle_and_exhaust() {
        let mut s = playing("AnimalDorms", 11);
        let first_scene = s.scene.clone();
        let end = s.abandon_attempt().unwrap();
        assert!(matches!(
            end.kind,
            GameEventKind::AttemptEnd {
                outcome: AttemptOutcome::Incomplete,
                ..
            }
        ));
        s.next_attempt(false).unwrap();
        assert_eq!(s.attempt_index, 2);
        assert_ne!(s.scene, first_scene);
        assert_eq!(s.phase, Phase::Playing);
        let second = s.scene.clone();
        s.abandon_attempt();
        s.next_attempt(true).unwrap();
        assert_eq!(s.scene, second);
        s.abandon_attempt();
        assert!(matches!(s.next_attempt(false), Err(SessionError::AttemptsExhausted(3))));
        assert_eq!(s.phase, Phase::Ended);
    }

    #[test]
    fn end_with_no_attempts() {
        let (catalog, arm, players) = setup();
        let mut s = create_session(
            &PlayerId::new("p1"),
            &TaskId::from("ScanBottle"),
            1,
            &catalog,
            &players,
            arm,
            SessionConfig::default(),
        )
        .unwrap();
        let summary = s.end_session();
        assert_eq!(summary.total_points, 0);
        assert!(summary.attempts.is_empty());
        assert!(!summary.any_success());
        assert_eq!(summary.best_attempt, None);
    }

    #[test]
    fn disconnect_mid_attempt_is_incomplete() {
        let mut s = playing("PackBox", 2);
        for _ in 0..30 {
            s.tick(&[], DEFAULT_DT);
        }
        let summary = s.end_session();
        assert_eq!(summary.attempts.len(), 1);
        assert_eq!(summary.attempts[0].outcome, AttemptOutcome::Incomplete);
        assert_eq!(s.phase, Phase::Ended);
    }

    #[test]
    fn derived_seeds_differ_per_attempt() {
        assert_eq!(derive_attempt_seed(42, 1), 42);
        assert_ne!(derive_attempt_seed(42, 2), derive_attempt_seed(42, 3));
    }
}
