//! Player profiles, points, badges and the leaderboard.
//!
//! [`ProgressionStore`] is a pure in-memory state machine driven by two
//! events: a player registering and a session summary being applied.
//! [`persist`] makes it durable by logging those events.

pub mod persist;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::SessionSummary;
use crate::task::TaskId;

pub use persist::{PersistError, PersistentStore, LOG_FILE, SNAPSHOT_FILE};

pub const USERNAME_MIN: usize = 3;
pub const USERNAME_MAX: usize = 24;

/// Pseudonymous player identifier; never the username.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlayerId(pub String);

impl PlayerId {
    pub fn new(s: impl Into<String>) -> Self {
        PlayerId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PlayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayerProfile {
    pub player_id: PlayerId,
    pub username: String,
    pub avatar_id: u32,
    pub total_points: u64,
    pub episodes_played: u64,
    pub games_played: u64,
    pub badges: BTreeSet<String>,
    /// Registration time, milliseconds since the Unix epoch.
    pub created_at: u64,
    /// Tasks with at least one fully successful attempt.
    #[serde(default)]
    pub tasks_completed: BTreeSet<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BadgeRule {
    EpisodesPlayed { n: u64 },
    GamesPlayed { n: u64 },
    TotalPoints { n: u64 },
    FirstSuccess {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task: Option<TaskId>,
    },
}

impl BadgeRule {
    pub fn satisfied(&self, p: &PlayerProfile) -> bool {
        match self {
            BadgeRule::EpisodesPlayed { n } => p.episodes_played >= *n,
            BadgeRule::GamesPlayed { n } => p.games_played >= *n,
            BadgeRule::TotalPoints { n } => p.total_points >= *n,
            BadgeRule::FirstSuccess { task: Some(t) } => p.tasks_completed.contains(t),
            BadgeRule::FirstSuccess { task: None } => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Badge {
    pub id: String,
    pub name: String,
    #[serde(flatten)]
    pub rule: BadgeRule,
}

#[derive(Debug, Error)]
pub enum ProgressionError {
    #[error("username must be {USERNAME_MIN}-{USERNAME_MAX} characters of [A-Za-z0-9_-], got {0:?}")]
    InvalidUsername(String),
    #[error("username {0:?} is taken")]
    UsernameTaken(String),
    #[error("player id {0} already registered")]
    DuplicatePlayer(PlayerId),
    #[error("unknown player {0}")]
    UnknownPlayer(PlayerId),
    #[error("invalid badge catalog: {0}")]
    Catalog(String),
}

/// Contents of `config/badges.toml`.
pub const DEFAULT_BADGES_TOML: &str = include_str!("../../../../config/badges.toml");

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BadgeCatalog {
    #[serde(rename = "badge")]
    pub badges: Vec<Badge>,
}

impl BadgeCatalog {
    /// Parses a catalog and expands task-less first-success templates, one per task.
    pub fn from_toml<'a>(text: &str, tasks: impl IntoIterator<Item = &'a TaskId>) -> Result<Self, ProgressionError> {
        let raw: BadgeCatalog = toml::from_str(text).map_err(|e| ProgressionError::Catalog(e.to_string()))?;
        let tasks: Vec<&TaskId> = tasks.into_iter().collect();
        let mut badges = Vec::new();
        for b in raw.badges {
            match b.rule {
                BadgeRule::FirstSuccess { task: None } => {
                    for t in &tasks {
                        badges.push(Badge {
                            id: format!("{}:{t}", b.id),
                            name: format!("{}: {t}", b.name),
                            rule: BadgeRule::FirstSuccess {
                                task: Some((*t).clone()),
                            },
                        });
                    }
                }
                _ => badges.push(b),
            }
        }
        let mut seen = BTreeSet::new();
        for b in &badges {
            if !seen.insert(&b.id) {
                return Err(ProgressionError::Catalog(format!("duplicate badge id {:?}", b.id)));
            }
        }
        Ok(Self { badges })
    }

    pub fn load<'a>(path: &Path, tasks: impl IntoIterator<Item = &'a TaskId>) -> Result<Self, ProgressionError> {
        let text = std::fs::read_to_string(path).map_err(|e| ProgressionError::Catalog(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, tasks)
    }

    pub fn builtin<'a>(tasks: impl IntoIterator<Item = &'a TaskId>) -> Self {
        Self::from_toml(DEFAULT_BADGES_TOML, tasks).expect("built-in badge catalog is valid")
    }

    pub fn get(&self, id: &str) -> Option<&Badge> {
        self.badges.iter().find(|b| b.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: u32,
    pub player_id: PlayerId,
    pub username: String,
    pub total_points: u64,
}

pub fn valid_username(name: &str) -> bool {
    (USERNAME_MIN..=USERNAME_MAX).contains(&name.chars().count())
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// In-memory progression state. Usernames are unique case-insensitively.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgressionStore {
    catalog: BadgeCatalog,
    profiles: BTreeMap<PlayerId, PlayerProfile>,
    usernames: BTreeMap<String, PlayerId>,
    applied: BTreeSet<String>,
}

impl ProgressionStore {
    pub fn new(catalog: BadgeCatalog) -> Self {
        Self {
            catalog,
            profiles: BTreeMap::new(),
            usernames: BTreeMap::new(),
            applied: BTreeSet::new(),
        }
    }

    pub fn catalog(&self) -> &BadgeCatalog {
        &self.catalog
    }

    pub fn profile(&self, id: &PlayerId) -> Option<&PlayerProfile> {
        self.profiles.get(id)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &PlayerProfile> {
        self.profiles.values()
    }

    pub fn by_username(&self, name: &str) -> Option<&PlayerProfile> {
        self.usernames.get(&name.to_ascii_lowercase()).and_then(|id| self.profiles.get(id))
    }

    pub fn applied_summaries(&self) -> &BTreeSet<String> {
        &self.applied
    }

    pub fn is_applied(&self, summary_id: &str) -> bool {
        self.applied.contains(summary_id)
    }

    /// Checks a registration without performing it.
    pub fn check_register(&self, player_id: &PlayerId, username: &str) -> Result<(), ProgressionError> {
        if !valid_username(username) {
            return Err(ProgressionError::InvalidUsername(username.to_string()));
        }
        if self.usernames.contains_key(&username.to_ascii_lowercase()) {
            return Err(ProgressionError::UsernameTaken(username.to_string()));
        }
        if self.profiles.contains_key(player_id) {
            return Err(ProgressionError::DuplicatePlayer(player_id.clone()));
        }
        Ok(())
    }

    pub fn register(
        &mut self,
        player_id: PlayerId,
        username: &str,
        avatar_id: u32,
        created_at: u64,
    ) -> Result<&PlayerProfile, ProgressionError> {
        self.check_register(&player_id, username)?;
        self.usernames.insert(username.to_ascii_lowercase(), player_id.clone());
        let profile = PlayerProfile {
            player_id: player_id.clone(),
            username: username.to_string(),
            avatar_id,
            total_points: 0,
            episodes_played: 0,
            games_played: 0,
            badges: BTreeSet::new(),
            created_at,
            tasks_completed: BTreeSet::new(),
        };
        Ok(self.profiles.entry(player_id).or_insert(profile))
    }

    /// Credits a session to its player and returns the badges it unlocked.
    ///
    /// A summary id that was already applied is a no-op returning no badges.
    pub fn apply_summary(&mut self, summary: &SessionSummary) -> Result<Vec<Badge>, ProgressionError> {
        if self.applied.contains(&summary.summary_id) {
            return Ok(Vec::new());
        }
        let profile = self
            .profiles
            .get_mut(&summary.player)
            .ok_or_else(|| ProgressionError::UnknownPlayer(summary.player.clone()))?;
        self.applied.insert(summary.summary_id.clone());
        profile.games_played += 1;
        profile.episodes_played += summary.attempts.len() as u64;
        profile.total_points += summary.total_points;
        if summary.any_success() {
            profile.tasks_completed.insert(summary.task.clone());
        }
        let mut unlocked = Vec::new();
        for badge in &self.catalog.badges {
            if !profile.badges.contains(&badge.id) && badge.rule.satisfied(profile) {
                profile.badges.insert(badge.id.clone());
                unlocked.push(badge.clone());
            }
        }
        Ok(unlocked)
    }

    /// Top `top_n` players by points; ties go to the earlier registration, then the username.
    pub fn leaderboard(&self, top_n: usize) -> Vec<LeaderboardEntry> {
        let mut all: Vec<&PlayerProfile> = self.profiles.values().collect();
        all.sort_by(|a, b| {
            b.total_points
                .cmp(&a.total_points)
                .then(a.created_at.cmp(&b.created_at))
                .then_with(|| a.username.cmp(&b.username))
        });
        all.into_iter()
            .take(top_n)
            .enumerate()
            .map(|(i, p)| LeaderboardEntry {
                rank: i as u32 + 1,
                player_id: p.player_id.clone(),
                username: p.username.clone(),
                total_points: p.total_points,
            })
            .collect()
    }

    pub(crate) fn restore(&mut self, profiles: Vec<PlayerProfile>, applied: BTreeSet<String>) {
        self.usernames = profiles
            .iter()
            .map(|p| (p.username.to_ascii_lowercase(), p.player_id.clone()))
            .collect();
        self.profiles = profiles.into_iter().map(|p| (p.player_id.clone(), p)).collect();
        self.applied = applied;
    }
}

impl crate::session::PlayerDirectory for ProgressionStore {
    fn contains(&self, player: &PlayerId) -> bool {
        self.profiles.contains_key(player)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::AttemptSummary;
    use crate::task::AttemptOutcome;

    fn store() -> ProgressionStore {
        let tasks = [TaskId::from("PackBox"), TaskId::from("ScanBottle")];
        ProgressionStore::new(BadgeCatalog::builtin(&tasks))
    }

    fn summary(id: &str, player: &str, attempts: usize, points: u64, success: bool) -> SessionSummary {
        let attempts = (0..attempts)
            .map(|i| AttemptSummary {
                attempt_index: i as u32 + 1,
                seed: 0,
                outcome: if success { AttemptOutcome::Success } else { AttemptOutcome::Timeout },
                stage_results: vec![],
                points: 0,
                duration: 1.0,
                episode_id: format!("{id}-{i:02}"),
                final_scene_hash: String::new(),
            })
            .collect();
        SessionSummary {
            summary_id: id.into(),
            player: PlayerId::new(player),
            task: TaskId::from("PackBox"),
            attempts,
            total_points: points,
            best_attempt: None,
        }
    }

    #[test]
    fn builtin_catalog_expands_templates() {
        let s = store();
        let ids: Vec<_> = s.catalog().badges.iter().map(|b| b.id.as_str()).collect();
        assert_eq!(
            ids,
            [
                "first_episode",
                "ten_episodes",
                "fifty_episodes",
                "thousand_points",
                "first_success:PackBox",
                "first_success:ScanBottle"
            ]
        );
    }

    #[test]
    fn usernames_validated_and_unique() {
        let mut s = store();
        assert!(s.register(PlayerId::new("a"), "ab", 0, 0).is_err());
        assert!(s.register(PlayerId::new("a"), &"x".repeat(25), 0, 0).is_err());
        assert!(s.register(PlayerId::new("a"), "has space", 0, 0).is_err());
        s.register(PlayerId::new("a"), "alice", 0, 0).unwrap();
        assert!(matches!(
            s.register(PlayerId::new("b"), "ALICE", 0, 0),
            Err(ProgressionError::UsernameTaken(_))
        ));
    }

    #[test]
    fn zero_point_summary_counts_game() {
        let mut s = store();
        s.register(PlayerId::new("a"), "alice", 0, 0).unwrap();
        s.apply_summary(&summary("s1", "a", 1, 0, false)).unwrap();
        let p = s.profile(&PlayerId::new("a")).unwrap();
        assert_eq!((p.games_played, p.episodes_played, p.total_points), (1, 1, 0));
    }

    #[test]
    fn threshold_badge_unlocks_once() {
        let mut s = store();
        s.register(PlayerId::new("a"), "alice", 0, 0).unwrap();
        let mut hits = 0;
        for i in 0..12 {
            let got = s.apply_summary(&summary(&format!("s{i}"), "a", 1, 0, false)).unwrap();
            hits += got.iter().filter(|b| b.id == "ten_episodes").count();
            if i == 9 {
                assert!(got.iter().any(|b| b.id == "ten_episodes"));
            }
        }
        assert_eq!(hits, 1);
    }

    #[test]
    fn duplicate_summary_is_noop() {
        let mut s = store();
        s.register(PlayerId::new("a"), "alice", 0, 0).unwrap();
        let sm = summary("s1", "a", 2, 1200, true);
        let first = s.apply_summary(&sm).unwrap();
        assert!(first.iter().any(|b| b.id == "first_success:PackBox"));
        assert!(first.iter().any(|b| b.id == "thousand_points"));
        let before = s.clone();
        assert!(s.apply_summary(&sm).unwrap().is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn unknown_player_rejected() {
        let mut s = store();
        assert!(matches!(
            s.apply_summary(&summary("s1", "ghost", 1, 0, false)),
            Err(ProgressionError::UnknownPlayer(_))
        ));
        assert!(!s.is_applied("s1"));
    }

    #[test]
    fn leaderboard_tie_breaks() {
        let mut s = store();
        assert!(s.leaderboard(10).is_empty());
        s.register(PlayerId::new("c"), "carol", 0, 0).unwrap();
        s.register(PlayerId::new("a"), "zed", 0, 1).unwrap();
        s.register(PlayerId::new("b"), "amy", 0, 2).unwrap();
        s.apply_summary(&summary("1", "a", 1, 50, false)).unwrap();
        s.apply_summary(&summary("2", "b", 1, 50, false)).unwrap();
        s.apply_summary(&summary("3", "c", 1, 10, false)).unwrap();
        let lb = s.leaderboard(10);
        let names: Vec<_> = lb.iter().map(|e| (e.rank, e.username.as_str())).collect();
        assert_eq!(names, [(1, "zed"), (2, "amy"), (3, "carol")]);
        assert_eq!(s.leaderboard(1).len(), 1);
    }
}
