//! Event-sourced durability for [`ProgressionStore`].
//!
//! Two line-delimited JSON files live in the store directory. `events.jsonl`
//! is an append-only log, one event per line:
//!
//! ```text
//! {"seq":1,"type":"player_registered","player_id":"…","username":"…","avatar_id":0,"created_at":0}
//! {"seq":2,"type":"summary_applied","summary":{…SessionSummary…}}
//! ```
//!
//! `snapshot.jsonl` is rewritten atomically; its first line is a header,
//! followed by one line per profile and one per applied summary id:
//!
//! ```text
//! {"type":"header","version":1,"last_seq":2}
//! {"type":"profile", …PlayerProfile fields…}
//! {"type":"applied","summary_id":"…"}
//! ```
//!
//! Recovery loads the snapshot and replays log events with a larger `seq`.
//! A torn final log line (no trailing newline) is discarded.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Badge, BadgeCatalog, PlayerId, PlayerProfile, ProgressionError, ProgressionStore};
use crate::session::SessionSummary;

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.jsonl";
const SNAPSHOT_VERSION: u32 = 1;
/// Events between automatic snapshots.
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 256;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Progression(#[from] ProgressionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    PlayerRegistered {
        player_id: PlayerId,
        username: String,
        avatar_id: u32,
        created_at: u64,
    },
    SummaryApplied {
        summary: SessionSummary,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum SnapshotLine {
    Header { version: u32, last_seq: u64 },
    Profile(PlayerProfile),
    Applied { summary_id: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn apply_event(store: &mut ProgressionStore, event: &Event) -> Result<Vec<Badge>, ProgressionError> {
    match event {
        Event::PlayerRegistered {
            player_id,
            username,
            avatar_id,
            created_at,
        } => {
            store.register(player_id.clone(), username, *avatar_id, *created_at)?;
            Ok(Vec::new())
        }
        Event::SummaryApplied { summary } => store.apply_summary(summary),
    }
}

/// A [`ProgressionStore`] whose every mutation is logged before it is applied.
#[derive(Debug)]
pub struct PersistentStore {
    dir: PathBuf,
    store: ProgressionStore,
    log: File,
    seq: u64,
    snapshot_seq: u64,
    snapshot_every: u64,
}

impl PersistentStore {
    /// Opens or creates the store in `dir`, recovering from snapshot and log.
    pub fn open(dir: &Path, catalog: BadgeCatalog) -> Result<Self, PersistError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut store = ProgressionStore::new(catalog);
        let snapshot_seq = load_snapshot(&dir.join(SNAPSHOT_FILE), &mut store)?;
        let log_path = dir.join(LOG_FILE);
        let (records, good_len) = read_log(&log_path)?;
        let mut seq = snapshot_seq;
        for (line, rec) in records {
            if rec.seq <= snapshot_seq {
                continue;
            }
            apply_event(&mut store, &rec.event).map_err(|e| PersistError::Corrupt {
                path: log_path.clone(),
                line,
                message: e.to_string(),
            })?;
            seq = rec.seq;
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        // Drop a torn tail so the next append starts on a fresh line.
        log.set_len(good_len).map_err(io_err(&log_path))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            store,
            log,
            seq,
            snapshot_seq,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
        })
    }

    pub fn with_snapshot_every(mut self, n: u64) -> Self {
        self.snapshot_every = n.max(1);
        self
    }

    pub fn store(&self) -> &ProgressionStore {
        &self.store
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Sequence number of the last logged event.
    pub fn seq(&self) -> u64 {
        self.seq
    }

    fn append(&mut self, event: Event) -> Result<Vec<Badge>, PersistError> {
        let rec = LogRecord {
            seq: self.seq + 1,
            event,
        };
        let mut line = serde_json::to_string(&rec).expect("log records serialize");
        line.push('\n');
        let path = self.dir.join(LOG_FILE);
        self.log.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.log.sync_data().map_err(io_err(&path))?;
        self.seq = rec.seq;
        let unlocked = apply_event(&mut self.store, &rec.event)?;
        if self.seq - self.snapshot_seq >= self.snapshot_every {
            self.snapshot()?;
        }
        Ok(unlocked)
    }

    pub fn register(
        &mut self,
        player_id: PlayerId,
        username: &str,
        avatar_id: u32,
        created_at: u64,
    ) -> Result<PlayerProfile, PersistError> {
        self.store.check_register(&player_id, username)?;
        self.append(Event::PlayerRegistered {
            player_id: player_id.clone(),
            username: username.to_string(),
            avatar_id,
            created_at,
        })?;
        Ok(self.store.profile(&player_id).expect("just registered").clone())
    }

    /// Applies a summary; replayed summary ids are no-ops and are not logged.
    pub fn apply_summary(&mut self, summary: &SessionSummary) -> Result<Vec<Badge>, PersistError> {
        if self.store.is_applied(&summary.summary_id) {
            return Ok(Vec::new());
        }
        if self.store.profile(&summary.player).is_none() {
            return Err(ProgressionError::UnknownPlayer(summary.player.clone()).into());
        }
        self.append(Event::SummaryApplied {
            summary: summary.clone(),
        })
    }

    /// Writes a snapshot atomically, then truncates the log it covers.
    pub fn snapshot(&mut self) -> Result<(), PersistError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let mut text = String::new();
        let mut push = |l: &SnapshotLine| {
            text.push_str(&serde_json::to_string(l).expect("snapshot lines serialize"));
            text.push('\n');
        };
        push(&SnapshotLine::Header {
            version: SNAPSHOT_VERSION,
            last_seq: self.seq,
        });
        for p in self.store.profiles() {
            push(&SnapshotLine::Profile(p.clone()));
        }
        for id in self.store.applied_summaries() {
            push(&SnapshotLine::Applied { summary_id: id.clone() });
        }
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(text.as_bytes()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        if let Ok(d) = File::open(&self.dir) {
            d.sync_all().map_err(io_err(&self.dir))?;
        }
        let log_path = self.dir.join(LOG_FILE);
        self.log.set_len(0).map_err(io_err(&log_path))?;
        self.log.sync_all().map_err(io_err(&log_path))?;
        self.snapshot_seq = self.seq;
        Ok(())
    }
}

fn load_snapshot(path: &Path, store: &mut ProgressionStore) -> Result<u64, PersistError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(io_err(path)(e)),
    };
    let corrupt = |line: usize, message: String| PersistError::Corrupt {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut last_seq = None;
    let mut profiles = Vec::new();
    let mut applied = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let parsed: SnapshotLine = serde_json::from_str(line).map_err(|e| corrupt(i + 1, e.to_string()))?;
        match (i, parsed) {
            (0, SnapshotLine::Header { version, last_seq: s }) => {
                if version != SNAPSHOT_VERSION {
                    return Err(corrupt(1, format!("unsupported snapshot version {version}")));
                }
                last_seq = Some(s);
            }
            (0, _) => return Err(corrupt(1, "missing header".into())),
            (_, SnapshotLine::Header { .. }) => return Err(corrupt(i + 1, "duplicate header".into())),
            (_, SnapshotLine::Profile(p)) => profiles.push(p),
            (_, SnapshotLine::Applied { summary_id }) => {
                applied.insert(summary_id);
            }
        }
    }
    let last_seq = last_seq.ok_or_else(|| corrupt(1, "empty snapshot".into()))?;
    store.restore(profiles, applied);
    Ok(last_seq)
}

/// Parses complete log lines; returns them with 1-based line numbers and
/// the byte length of the complete prefix.
fn read_log(path: &Path) -> Result<(Vec<(usize, LogRecord)>, u64), PersistError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let good_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut out = Vec::new();
    let mut prev = 0;
    for (i, line) in bytes[..good_len].split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_slice(line).map_err(|e| PersistError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.seq <= prev {
            return Err(PersistError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("sequence {} does not follow {prev}", rec.seq),
            });
        }
        prev = rec.seq;
        out.push((i + 1, rec));
    }
    Ok((out, good_len as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskId;

    fn catalog() -> BadgeCatalog {
        BadgeCatalog::builtin(&[TaskId::from("PackBox")])
    }

    fn summary(id: &str, points: u64) -> SessionSummary {
        SessionSummary {
            summary_id: id.into(),
            player: PlayerId::new("p1"),
            task: TaskId::from("PackBox"),
            attempts: vec![],
            total_points: points,
            best_attempt: None,
        }
    }

    #[test]
    fn recovers_from_log_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let expected = {
            let mut s = PersistentStore::open(dir.path(), catalog()).unwrap().with_snapshot_every(3);
            s.register(PlayerId::new("p1"), "alice", 2, 10).unwrap();
            for i in 0..5 {
                s.apply_summary(&summary(&format!("s{i}"), 300)).unwrap();
            }
            s.apply_summary(&summary("s0", 300)).unwrap();
            assert_eq!(s.seq(), 6);
            s.store().clone()
        };
        let reopened = PersistentStore::open(dir.path(), catalog()).unwrap();
        assert_eq!(reopened.store(), &expected);
        assert_eq!(reopened.seq(), 6);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = PersistentStore::open(dir.path(), catalog()).unwrap();
            s.register(PlayerId::new("p1"), "alice", 0, 0).unwrap();
            s.apply_summary(&summary("a", 5)).unwrap();
        }
        let log = dir.path().join(LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"seq\":3,\"type\":\"summ").unwrap();
        drop(f);
        let mut s = PersistentStore::open(dir.path(), catalog()).unwrap();
        assert_eq!(s.seq(), 2);
        s.apply_summary(&summary("b", 5)).unwrap();
        let s = PersistentStore::open(dir.path(), catalog()).unwrap();
        assert_eq!(s.store().profile(&PlayerId::new("p1")).unwrap().total_points, 10);
    }

    #[test]
    fn corrupt_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOG_FILE), "not json\n").unwrap();
        match PersistentStore::open(dir.path(), catalog()) {
            Err(PersistError::Corrupt { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }
}
