use std::path::{Path, PathBuf};

use thiserror::Error;

use super::format::{write_episode, FormatError};
use super::{Episode, EpisodeMeta, Transition, SOFTWARE_VERSION};
use crate::session::{AttemptSummary, SessionState};
use crate::task::{AttemptOutcome, GameEvent, GameEventKind};

#[derive(Debug, Error)]
pub enum RecorderError {
    #[error("recording disabled after an earlier failure")]
    Disabled,
    #[error("no finished attempt to record")]
    NothingToRecord,
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl RecorderError {
    /// The non-fatal HUD notice for this failure.
    pub fn warning(&self, t: f64) -> GameEvent {
        GameEvent::new(
            t,
            GameEventKind::Warning {
                message: format!("episode recording disabled: {self}"),
            },
        )
    }
}

/// Assembles the episode for a finished attempt from the live session.
pub fn build_episode(session: &SessionState, attempt: &AttemptSummary, transitions: Vec<Transition>, dt: f64) -> Episode {
    Episode {
        meta: EpisodeMeta {
            episode_id: attempt.episode_id.clone(),
            task: session.task.clone(),
            player: session.operator.to_string(),
            attempt_index: attempt.attempt_index,
            seed: attempt.seed,
            success: attempt.outcome == AttemptOutcome::Success,
            incomplete: attempt.outcome == AttemptOutcome::Incomplete,
            outcome: attempt.outcome.clone(),
            points: attempt.points,
            dt,
            ticks: session.attempt_ticks(),
            software_version: SOFTWARE_VERSION.to_string(),
            final_scene_hash: attempt.final_scene_hash.clone(),
            object_ids: session.scene.objects.iter().map(|o| o.id.clone()).collect(),
            stage_results: attempt.stage_results.clone(),
            attachments: Vec::new(),
        },
        transitions,
        inputs: session.input_log().to_vec(),
    }
}

/// Buffers one attempt's transitions and writes the episode at attempt end.
///
/// The first write failure disables the recorder for the rest of the
/// session; the session keeps running.
#[derive(Debug)]
pub struct EpisodeRecorder {
    root: PathBuf,
    dt: f64,
    buffer: Vec<Transition>,
    disabled: bool,
    written: Vec<PathBuf>,
}

impl EpisodeRecorder {
    pub fn new(root: impl Into<PathBuf>, dt: f64) -> Self {
        Self {
            root: root.into(),
            dt,
            buffer: Vec::new(),
            disabled: false,
            written: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_enabled(&self) -> bool {
        !self.disabled
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn buffered(&self) -> &[Transition] {
        &self.buffer
    }

    pub fn push(&mut self, transitions: impl IntoIterator<Item = Transition>) {
        if !self.disabled {
            self.buffer.extend(transitions);
        }
    }

    /// Writes the session's most recent finished attempt and clears the buffer.
    pub fn finish_attempt(&mut self, session: &SessionState) -> Result<PathBuf, RecorderError> {
        let transitions = std::mem::take(&mut self.buffer);
        if self.disabled {
            return Err(RecorderError::Disabled);
        }
        let attempt = session.attempts().last().ok_or(RecorderError::NothingToRecord)?;
        let episode = build_episode(session, attempt, transitions, self.dt);
        match write_episode(&self.root, &episode) {
            Ok(dir) => {
                self.written.push(dir.clone());
                Ok(dir)
            }
            Err(e) => {
                self.disabled = true;
                Err(e.into())
            }
        }
    }
}
