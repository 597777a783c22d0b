//! On-disk episode layout.
//!
//! `manifest.toml` holds the format version, record counts and the
//! [`EpisodeMeta`](super::EpisodeMeta) under an `[episode]` table. Seeds are
//! stored as decimal strings because TOML integers are signed 64-bit.
//!
//! `transitions.bin`, all little-endian:
//!
//! ```text
//! header (24 bytes)
//!   0   [u8; 4]  magic "TLTR"
//!   4   u32      format version
//!   8   u32      object count N
//!   12  u32      reserved, zero
//!   16  u64      record count
//! record (8 × (23 + 7N) + 8 bytes)
//!   f64          t
//!   f64 × 7      observation.q
//!   f64          observation.gripper_aperture
//!   f64 × 7      observation.ee_pose  [px, py, pz, qw, qx, qy, qz]
//!   f64 × 7N     observation.object_poses, same layout, scene order
//!   f64 × 7      action.target_q
//!   u8           action.gripper_closed (0 or 1)
//!   [u8; 7]      padding, zero
//! ```
//!
//! `inputs.bin`:
//!
//! ```text
//! header (16 bytes)
//!   0   [u8; 4]  magic "TLIN"
//!   4   u32      format version
//!   8   u64      record count
//! record (72 bytes)
//!   u64          tick
//!   f64 × 7      target_q
//!   u8           gripper_closed (0 or 1)
//!   [u8; 7]      padding, zero
//! ```

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Action, AppliedInput, Episode, EpisodeMeta, Observation, Transition};
use crate::arm::{JointVector, DOF};
use crate::geometry::Pose3;

pub const TRANSITIONS_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TRANSITIONS_FILE: &str = "transitions.bin";
pub const INPUTS_FILE: &str = "inputs.bin";

const TRANSITIONS_MAGIC: &[u8; 4] = b"TLTR";
const INPUTS_MAGIC: &[u8; 4] = b"TLIN";
const TRANSITIONS_HEADER: usize = 24;
const INPUTS_HEADER: usize = 16;
const INPUT_RECORD: usize = 8 + 8 * DOF + 8;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: invalid manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: corrupt at byte {offset}: {reason}")]
    Corrupt {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{path}: unsupported format version {found}")]
    Version { path: PathBuf, found: u32 },
    #[error("transition {index} has {found} object poses, episode has {expected}")]
    Shape {
        index: usize,
        found: usize,
        expected: usize,
    },
}

impl FormatError {
    fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Whether the underlying cause is an I/O failure such as a full disk.
    pub fn is_io(&self) -> bool {
        matches!(self, FormatError::Io { .. })
    }
}

/// Top level of `manifest.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub object_count: u32,
    pub transition_count: u64,
    pub input_count: u64,
    pub episode: EpisodeMeta,
}

pub fn record_size(objects: usize) -> usize {
    8 * (23 + 7 * objects) + 8
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_flag(buf: &mut Vec<u8>, b: bool) {
    buf.push(u8::from(b));
    buf.extend_from_slice(&[0u8; 7]);
}

pub fn encode_transitions(transitions: &[Transition], objects: usize) -> Result<Vec<u8>, FormatError> {
    let mut buf = Vec::with_capacity(TRANSITIONS_HEADER + transitions.len() * record_size(objects));
    buf.extend_from_slice(TRANSITIONS_MAGIC);
    buf.extend_from_slice(&TRANSITIONS_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(objects as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&(transitions.len() as u64).to_le_bytes());
    for (index, tr) in transitions.iter().enumerate() {
        let o = &tr.observation;
        if o.object_poses.len() != objects {
            return Err(FormatError::Shape {
                index,
                found: o.object_poses.len(),
                expected: objects,
            });
        }
        put_f64s(&mut buf, &[tr.t]);
        put_f64s(&mut buf, &o.q.0);
        put_f64s(&mut buf, &[o.gripper_aperture]);
        put_f64s(&mut buf, &o.ee_pose.to_array());
        for p in &o.object_poses {
            put_f64s(&mut buf, &p.to_array());
        }
        put_f64s(&mut buf, &tr.action.target_q.0);
        put_flag(&mut buf, tr.action.gripper_closed);
    }
    Ok(buf)
}

pub fn encode_inputs(inputs: &[AppliedInput]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(INPUTS_HEADER + inputs.len() * INPUT_RECORD);
    buf.extend_from_slice(INPUTS_MAGIC);
    buf.extend_from_slice(&TRANSITIONS_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(inputs.len() as u64).to_le_bytes());
    for i in inputs {
        buf.extend_from_slice(&i.tick.to_le_bytes());
        put_f64s(&mut buf, &i.target_q.0);
        put_flag(&mut buf, i.gripper_closed);
    }
    buf
}

/// Bounds-checked little-endian reader that reports byte offsets.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, offset: usize, reason: impl Into<String>) -> FormatError {
        FormatError::Corrupt {
            path: self.path.to_path_buf(),
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(self.pos, format!("truncated, needed {n} more bytes"))),
        }
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s<const N: usize>(&mut self) -> Result<[f64; N], FormatError> {
        let mut out = [0.0; N];
        for x in &mut out {
            *x = self.f64()?;
        }
        Ok(out)
    }

    fn flag(&mut self) -> Result<bool, FormatError> {
        let at = self.pos;
        let b = self.take(8)?;
        if b[1..].iter().any(|&p| p != 0) {
            return Err(self.corrupt(at + 1, "nonzero padding"));
        }
        match b[0] {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.corrupt(at, format!("invalid flag byte {v}"))),
        }
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<(), FormatError> {
        let got = self.take(4)?;
        if got != want {
            return Err(self.corrupt(0, format!("bad magic {got:?}")));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), FormatError> {
        let v = self.u32()?;
        if v != TRANSITIONS_FORMAT_VERSION {
            return Err(FormatError::Version {
                path: self.path.to_path_buf(),
                found: v,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt(self.pos, "trailing bytes"));
        }
        Ok(())
    }

    fn pose(&mut self) -> Result<Pose3, FormatError> {
        // Stored quaternions are already unit; renormalizing would break bit equality.
        Ok(Pose3::from_array(self.f64s::<7>()?))
    }
}

pub fn decode_transitions(path: &Path, bytes: &[u8]) -> Result<(u32, Vec<Transition>), FormatError> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(TRANSITIONS_MAGIC)?;
    r.version()?;
    let objects = r.u32()?;
    r.u32()?;
    let count = r.u64()?;
    let expect = (count as u128) * record_size(objects as usize) as u128 + TRANSITIONS_HEADER as u128;
    if expect != bytes.len() as u128 {
        return Err(r.corrupt(16, format!("record count {count} does not match file length {}", bytes.len())));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let t = r.f64()?;
        let q = JointVector(r.f64s::<DOF>()?);
        let gripper_aperture = r.f64()?;
        let ee_pose = r.pose()?;
        let object_poses = (0..objects).map(|_| r.pose()).collect::<Result<Vec<_>, _>>()?;
        let target_q = JointVector(r.f64s::<DOF>()?);
        let gripper_closed = r.flag()?;
        out.push(Transition {
            t,
            observation: Observation {
                q,
                gripper_aperture,
                ee_pose,
                object_poses,
            },
            action: Action {
                target_q,
                gripper_closed,
            },
        });
    }
    r.finish()?;
    Ok((objects, out))
}

pub fn decode_inputs(path: &Path, bytes: &[u8]) -> Result<Vec<AppliedInput>, FormatError> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(INPUTS_MAGIC)?;
    r.version()?;
    let count = r.u64()?;
    if (count as u128) * INPUT_RECORD as u128 + INPUTS_HEADER as u128 != bytes.len() as u128 {
        return Err(r.corrupt(8, format!("record count {count} does not match file length {}", bytes.len())));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        out.push(AppliedInput {
            tick: r.u64()?,
            target_q: JointVector(r.f64s::<DOF>()?),
            gripper_closed: r.flag()?,
        });
    }
    r.finish()?;
    Ok(out)
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let mut f = File::create(path).map_err(|e| FormatError::io(path, e))?;
    f.write_all(bytes).map_err(|e| FormatError::io(path, e))?;
    f.sync_all().map_err(|e| FormatError::io(path, e))
}

fn sync_dir(path: &Path) -> Result<(), FormatError> {
    // Directory fsync is unsupported on some platforms; a failure to open is not fatal.
    if let Ok(d) = File::open(path) {
        d.sync_all().map_err(|e| FormatError::io(path, e))?;
    }
    Ok(())
}

/// Directory holding one episode: `<root>/<task>/<episode_id>`.
pub fn episode_dir(root: &Path, episode: &EpisodeMeta) -> PathBuf {
    root.join(episode.task.as_str()).join(&episode.episode_id)
}

pub fn manifest_for(episode: &Episode) -> Manifest {
    Manifest {
        format_version: TRANSITIONS_FORMAT_VERSION,
        object_count: episode.meta.object_ids.len() as u32,
        transition_count: episode.transitions.len() as u64,
        input_count: episode.inputs.len() as u64,
        episode: episode.meta.clone(),
    }
}

/// Writes an episode under `root` and fsyncs it.
///
/// Files are written into a sibling staging directory that is renamed into
/// place, so readers never observe a half-written episode. An existing
/// episode with the same id is replaced.
pub fn write_episode(root: &Path, episode: &Episode) -> Result<PathBuf, FormatError> {
    let dir = episode_dir(root, &episode.meta);
    let parent = dir.parent().expect("episode dir has a parent");
    fs::create_dir_all(parent).map_err(|e| FormatError::io(parent, e))?;
    let staging = parent.join(format!(".{}.partial", episode.meta.episode_id));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| FormatError::io(&staging, e))?;
    }
    fs::create_dir(&staging).map_err(|e| FormatError::io(&staging, e))?;

    let objects = episode.meta.object_ids.len();
    let manifest = toml::to_string_pretty(&manifest_for(episode)).map_err(|e| FormatError::Manifest {
        path: staging.join(MANIFEST_FILE),
        message: e.to_string(),
    })?;
    write_synced(&staging.join(TRANSITIONS_FILE), &encode_transitions(&episode.transitions, objects)?)?;
    write_synced(&staging.join(INPUTS_FILE), &encode_inputs(&episode.inputs))?;
    write_synced(&staging.join(MANIFEST_FILE), manifest.as_bytes())?;
    sync_dir(&staging)?;

    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| FormatError::io(&dir, e))?;
    }
    fs::rename(&staging, &dir).map_err(|e| FormatError::io(&dir, e))?;
    sync_dir(parent)?;
    Ok(dir)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, FormatError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| FormatError::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| FormatError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format_version != TRANSITIONS_FORMAT_VERSION {
        return Err(FormatError::Version {
            path,
            found: manifest.format_version,
        });
    }
    if manifest.object_count as usize != manifest.episode.object_ids.len() {
        return Err(FormatError::Manifest {
            path,
            message: "object_count does not match object_ids".into(),
        });
    }
    Ok(manifest)
}

pub fn read_episode(dir: &Path) -> Result<Episode, FormatError> {
    let manifest = read_manifest(dir)?;
    let tpath = dir.join(TRANSITIONS_FILE);
    let bytes = fs::read(&tpath).map_err(|e| FormatError::io(&tpath, e))?;
    let (objects, transitions) = decode_transitions(&tpath, &bytes)?;
    if objects != manifest.object_count || transitions.len() as u64 != manifest.transition_count {
        return Err(FormatError::Manifest {
            path: dir.join(MANIFEST_FILE),
            message: "counts disagree with transitions.bin".into(),
        });
    }
    let ipath = dir.join(INPUTS_FILE);
    let bytes = fs::read(&ipath).map_err(|e| FormatError::io(&ipath, e))?;
    let inputs = decode_inputs(&ipath, &bytes)?;
    if inputs.len() as u64 != manifest.input_count {
        return Err(FormatError::Manifest {
            path: dir.join(MANIFEST_FILE),
            message: "input_count disagrees with inputs.bin".into(),
        });
    }
    Ok(Episode {
        meta: manifest.episode,
        transitions,
        inputs,
    })
}
