//! Demonstration episodes: recording, on-disk format, indexing, co-training
//! batch sampling and replay.
//!
//! Each attempt becomes one episode directory:
//!
//! ```text
//! <root>/<task>/<episode_id>/
//!     manifest.toml      human-readable metadata and stage results
//!     transitions.bin    fixed-width little-endian observation/action records
//!     inputs.bin         the operator input actually applied, per change
//! ```
//!
//! The binary layouts are documented on [`format`].

pub mod format;
mod index;
mod record;
mod replay;
mod sampler;

pub use format::{read_episode, write_episode, FormatError, TRANSITIONS_FORMAT_VERSION};
pub use index::{DatasetIndex, EpisodeRef, SourceLabel};
pub use record::{build_episode, EpisodeRecorder, RecorderError};
pub use replay::{replay, Divergence, ReplayError, ReplayReport};
pub use sampler::{BatchItem, CotrainSampler, SamplerError, Source, SourceEpisode, DEFAULT_BATCH_SIZE, DEFAULT_SPLIT};

use serde::{Deserialize, Serialize};

use crate::arm::JointVector;
use crate::geometry::Pose3;
use crate::task::{AttemptOutcome, StageResult, TaskId};

/// Recording cadence in Hz.
pub const RECORD_HZ: f64 = 12.0;

/// What the operator saw at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub q: JointVector,
    pub gripper_aperture: f64,
    pub ee_pose: Pose3,
    /// One pose per scene object, in scene order.
    pub object_poses: Vec<Pose3>,
}

/// The command the arm tracked at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub target_q: JointVector,
    pub gripper_closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Seconds since the attempt started.
    pub t: f64,
    pub observation: Observation,
    pub action: Action,
}

/// Operator input as applied by the session loop, logged whenever it changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedInput {
    /// Tick index within the attempt at which the input took effect.
    pub tick: u64,
    pub target_q: JointVector,
    pub gripper_closed: bool,
}

/// Episode metadata kept in `manifest.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub episode_id: String,
    pub task: TaskId,
    /// Pseudonymous player id.
    pub player: String,
    pub attempt_index: u32,
    #[serde(with = "crate::u64_text")]
    pub seed: u64,
    pub success: bool,
    pub incomplete: bool,
    pub outcome: AttemptOutcome,
    pub points: u64,
    /// Simulation step used while recording, seconds.
    pub dt: f64,
    /// Simulation ticks played in the attempt.
    pub ticks: u64,
    pub software_version: String,
    pub final_scene_hash: String,
    pub object_ids: Vec<String>,
    pub stage_results: Vec<StageResult>,
    /// Reserved for image references; always empty in this version.
    #[serde(default)]
    pub attachments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub transitions: Vec<Transition>,
    pub inputs: Vec<AppliedInput>,
}

/// Version string stamped into manifests.
pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Whether an episode recorded by `recorded` can be replayed by this build:
/// same major and minor version.
pub fn version_compatible(recorded: &str) -> bool {
    let key = |v: &str| {
        let mut it = v.split('.');
        (it.next().map(str::to_owned), it.next().map(str::to_owned))
    };
    key(recorded) == key(SOFTWARE_VERSION)
}

