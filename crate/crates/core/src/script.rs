//! Scripted operator input.
//!
//! A script is a plain-text file of timed joint targets:
//!
//! ```text
//! # comments start with '#'
//! task AnimalDorms
//! seed 7
//! expect success 3
//! disconnect 12.5          (optional: operator leaves at this attempt time)
//! 0.00  0 -0.25 0 -2.4 0 2.15 0  open
//! 0.05  0.001 -0.25 0 -2.4 0 2.15 0  open
//! ```
//!
//! Each data line holds the attempt time in seconds, seven joint targets in
//! radians and the gripper command. Times never decrease. A step becomes the
//! operator's input on the first tick whose start time reaches it.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::arm::{JointVector, DOF};
use crate::dataset::Transition;
use crate::session::{OperatorInput, Phase, SessionState};
use crate::task::{AttemptOutcome, GameEvent, TaskId};

/// Slack when comparing step times with the session clock.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptStep {
    pub t: f64,
    pub q: JointVector,
    pub gripper_closed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expectation {
    pub outcome: AttemptOutcome,
    pub stages: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub task: TaskId,
    pub seed: u64,
    pub expect: Option<Expectation>,
    pub disconnect_at: Option<f64>,
    pub steps: Vec<ScriptStep>,
}

fn parse_outcome(s: &str) -> Option<AttemptOutcome> {
    match s {
        "success" => Some(AttemptOutcome::Success),
        "timeout" => Some(AttemptOutcome::Timeout),
        "incomplete" => Some(AttemptOutcome::Incomplete),
        _ => None,
    }
}

fn outcome_name(o: &AttemptOutcome) -> &'static str {
    match o {
        AttemptOutcome::Success => "success",
        AttemptOutcome::Timeout => "timeout",
        AttemptOutcome::Incomplete => "incomplete",
    }
}

impl FromStr for Script {
    type Err = ScriptError;

    fn from_str(text: &str) -> Result<Self, ScriptError> {
        let mut task = None;
        let mut seed = None;
        let mut expect = None;
        let mut disconnect_at = None;
        let mut steps: Vec<ScriptStep> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ScriptError { line, message };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("expected a number, got {s:?}")));
            match fields[0] {
                "task" if fields.len() == 2 => task = Some(TaskId::from(fields[1])),
                "seed" if fields.len() == 2 => {
                    seed = Some(fields[1].parse::<u64>().map_err(|_| err(format!("bad seed {:?}", fields[1])))?)
                }
                "expect" if fields.len() == 3 => {
                    let outcome = parse_outcome(fields[1]).ok_or_else(|| err(format!("unknown outcome {:?}", fields[1])))?;
                    let stages = fields[2].parse().map_err(|_| err(format!("bad stage count {:?}", fields[2])))?;
                    expect = Some(Expectation { outcome, stages });
                }
                "disconnect" if fields.len() == 2 => disconnect_at = Some(num(fields[1])?),
                "task" | "seed" | "expect" | "disconnect" => return Err(err(format!("malformed {:?} line", fields[0]))),
                _ => {
                    if fields.len() != DOF + 2 {
                        return Err(err(format!("expected {} fields, got {}", DOF + 2, fields.len())));
                    }
                    let t = num(fields[0])?;
                    if !t.is_finite() || t < 0.0 {
                        return Err(err(format!("invalid time {t}")));
                    }
                    if steps.last().is_some_and(|s| t < s.t) {
                        return Err(err("time goes backwards".into()));
                    }
                    let mut q = [0.0; DOF];
                    for (j, f) in fields[1..=DOF].iter().enumerate() {
                        q[j] = num(f)?;
                    }
                    let gripper_closed = match fields[DOF + 1] {
                        "open" => false,
                        "closed" => true,
                        other => return Err(err(format!("gripper must be open or closed, got {other:?}"))),
                    };
                    steps.push(ScriptStep {
                        t,
                        q: JointVector(q),
                        gripper_closed,
                    });
                }
            }
        }
        let missing = |what: &str| ScriptError {
            line: text.lines().count().max(1),
            message: format!("missing {what} line"),
        };
        Ok(Script {
            task: task.ok_or_else(|| missing("task"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            expect,
            disconnect_at,
            steps,
        })
    }
}

impl Script {
    pub fn load(path: &Path) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(text.parse::<Script>().map_err(|e| format!("{}: {e}", path.display()))?)
    }

    /// Serializes with round-trip float formatting.
    pub fn to_text(&self, comment: &str) -> String {
        let mut out = String::new();
        for l in comment.lines() {
            let _ = writeln!(out, "# {l}");
        }
        let _ = writeln!(out, "task {}", self.task);
        let _ = writeln!(out, "seed {}", self.seed);
        if let Some(e) = &self.expect {
            let _ = writeln!(out, "expect {} {}", outcome_name(&e.outcome), e.stages);
        }
        if let Some(t) = self.disconnect_at {
            let _ = writeln!(out, "disconnect {t:?}");
        }
        for s in &self.steps {
            let _ = write!(out, "{:?}", s.t);
            for q in &s.q.0 {
                let _ = write!(out, " {q:?}");
            }
            let _ = writeln!(out, " {}", if s.gripper_closed { "closed" } else { "open" });
        }
        out
    }

    pub fn duration(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.t)
    }
}

/// Feeds script steps to a session as the attempt clock advances.
#[derive(Debug, Clone)]
pub struct ScriptPlayer<'a> {
    script: &'a Script,
    next: usize,
    seq: u64,
}

impl<'a> ScriptPlayer<'a> {
    pub fn new(script: &'a Script) -> Self {
        Self {
            script,
            next: 0,
            seq: 0,
        }
    }

    /// The newest step due at `clock`, as an input, if any became due since the last call.
    pub fn due(&mut self, clock: f64) -> Option<OperatorInput> {
        let mut latest = None;
        while let Some(step) = self.script.steps.get(self.next) {
            if step.t > clock + TIME_EPS {
                break;
            }
            latest = Some(step);
            self.next += 1;
        }
        latest.map(|s| {
            self.seq += 1;
            OperatorInput {
                seq: self.seq,
                target_q: s.q,
                gripper_closed: s.gripper_closed,
                client_timestamp: (s.t * 1000.0) as u64,
            }
        })
    }

    pub fn finished(&self) -> bool {
        self.next >= self.script.steps.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct AttemptRun {
    pub events: Vec<GameEvent>,
    pub transitions: Vec<Transition>,
}

/// Plays `script` against a session already in the playing phase until the
/// attempt ends, the script disconnects, or the time limit passes.
pub fn play_attempt(session: &mut SessionState, script: &Script, dt: f64) -> AttemptRun {
    let mut run = AttemptRun::default();
    let mut player = ScriptPlayer::new(script);
    while session.phase == Phase::Playing {
        if script.disconnect_at.is_some_and(|t| session.clock + TIME_EPS >= t) {
            run.events.extend(session.abandon_attempt());
            break;
        }
        let pending: Vec<OperatorInput> = player.due(session.clock).into_iter().collect();
        let (events, transitions) = session.tick(&pending, dt);
        run.events.extend(events);
        run.transitions.extend(transitions);
    }
    run
}
