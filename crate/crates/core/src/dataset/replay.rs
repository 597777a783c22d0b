use std::sync::Arc;

use thiserror::Error;

use super::format::{encode_transitions, record_size, FormatError};
use super::{version_compatible, Episode, Transition, SOFTWARE_VERSION};
use crate::arm::ArmConfig;
use crate::progression::PlayerId;
use crate::session::{Phase, SessionConfig, SessionError, SessionId, SessionState, SessionSummary};
use crate::task::{StageResult, TaskCatalog};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("episode recorded by version {recorded}, this build is {SOFTWARE_VERSION}")]
    VersionMismatch { recorded: String },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("episode id {0:?} is not <session>-<attempt>")]
    BadEpisodeId(String),
}

/// The first point where a replay departed from the recording.
#[derive(Debug, Clone, PartialEq)]
pub enum Divergence {
    Transition { index: usize, t: f64 },
    TransitionCount { recorded: usize, replayed: usize },
    StageResults { recorded: Vec<StageResult>, replayed: Vec<StageResult> },
    SceneHash { recorded: String, replayed: String },
    Outcome { recorded: String, replayed: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub summary: SessionSummary,
    pub stage_results: Vec<StageResult>,
    pub final_scene_hash: String,
    pub transitions: Vec<Transition>,
    pub divergence: Option<Divergence>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.divergence.is_none()
    }
}

fn stages_bit_equal(a: &[StageResult], b: &[StageResult]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.stage == y.stage && x.achieved == y.achieved && x.t_achieved.map(f64::to_bits) == y.t_achieved.map(f64::to_bits)
        })
}

fn first_transition_divergence(recorded: &[Transition], replayed: &[Transition], objects: usize) -> Option<Divergence> {
    let size = record_size(objects);
    let enc = |t: &Transition| encode_transitions(std::slice::from_ref(t), objects).map(|b| b[b.len() - size..].to_vec());
    for (index, (r, p)) in recorded.iter().zip(replayed).enumerate() {
        if enc(r).ok() != enc(p).ok() {
            return Some(Divergence::Transition { index, t: r.t });
        }
    }
    (recorded.len() != replayed.len()).then_some(Divergence::TransitionCount {
        recorded: recorded.len(),
        replayed: replayed.len(),
    })
}

/// Re-runs an episode's applied inputs through a fresh session and compares
/// the result with the recording, bit for bit.
pub fn replay(episode: &Episode, catalog: &TaskCatalog, arm: Arc<ArmConfig>) -> Result<ReplayReport, ReplayError> {
    let meta = &episode.meta;
    if !version_compatible(&meta.software_version) {
        return Err(ReplayError::VersionMismatch {
            recorded: meta.software_version.clone(),
        });
    }
    let spec = catalog.get(&meta.task).map_err(SessionError::from)?;
    let session_id = meta
        .episode_id
        .rsplit_once('-')
        .and_then(|(s, _)| SessionId::parse(s))
        .ok_or_else(|| ReplayError::BadEpisodeId(meta.episode_id.clone()))?;

    let mut session = SessionState::new(
        session_id,
        PlayerId::new(meta.player.clone()),
        Arc::new(spec.clone()),
        arm,
        meta.seed,
        SessionConfig { countdown_s: 0.0 },
    )?;
    session.attempt_index = meta.attempt_index;
    session.start()?;

    let mut transitions = Vec::new();
    let mut inputs = episode.inputs.iter().peekable();
    let mut tick = 0u64;
    while session.phase == Phase::Playing && tick < meta.ticks {
        while let Some(input) = inputs.next_if(|i| i.tick == tick) {
            session.apply_logged_input(input);
        }
        let (_, tr) = session.simulate(meta.dt);
        transitions.extend(tr);
        tick += 1;
    }
    session.abandon_attempt();
    let summary = session.end_session();
    let attempt = summary.attempts.last().expect("one attempt was played").clone();

    let divergence = first_transition_divergence(&episode.transitions, &transitions, meta.object_ids.len())
        .or_else(|| {
            (!stages_bit_equal(&meta.stage_results, &attempt.stage_results)).then(|| Divergence::StageResults {
                recorded: meta.stage_results.clone(),
                replayed: attempt.stage_results.clone(),
            })
        })
        .or_else(|| {
            (meta.final_scene_hash != attempt.final_scene_hash).then(|| Divergence::SceneHash {
                recorded: meta.final_scene_hash.clone(),
                replayed: attempt.final_scene_hash.clone(),
            })
        })
        .or_else(|| {
            (meta.outcome != attempt.outcome || meta.points != attempt.points).then(|| Divergence::Outcome {
                recorded: format!("{:?}/{}", meta.outcome, meta.points),
                replayed: format!("{:?}/{}", attempt.outcome, attempt.points),
            })
        });

    Ok(ReplayReport {
        stage_results: attempt.stage_results,
        final_scene_hash: attempt.final_scene_hash,
        summary,
        transitions,
        divergence,
    })
}
