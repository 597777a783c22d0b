use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{read_manifest, FormatError, MANIFEST_FILE};
use super::EpisodeMeta;
use crate::task::{TaskCatalog, TaskId, TaskRole};

/// Which data source an episode belongs to for co-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceLabel {
    Target,
    Support,
}

impl From<TaskRole> for SourceLabel {
    fn from(r: TaskRole) -> Self {
        match r {
            TaskRole::Target => SourceLabel::Target,
            TaskRole::Support => SourceLabel::Support,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRef {
    pub dir: PathBuf,
    pub label: SourceLabel,
    pub transitions: u64,
    pub meta: EpisodeMeta,
}

/// All completed episodes under a dataset root, sorted by task then id.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    root: PathBuf,
    episodes: Vec<EpisodeRef>,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>, FormatError> {
    let io = |e| FormatError::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        let name = entry.file_name();
        // Staging directories of in-flight writes start with a dot.
        if name.to_string_lossy().starts_with('.') || !entry.file_type().map_err(io)?.is_dir() {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

impl DatasetIndex {
    /// Scans `root`. A missing root is an empty dataset.
    pub fn scan(root: &Path, catalog: &TaskCatalog) -> Result<Self, FormatError> {
        let mut episodes = Vec::new();
        if root.exists() {
            for task_dir in sorted_subdirs(root)? {
                for dir in sorted_subdirs(&task_dir)? {
                    let manifest = read_manifest(&dir)?;
                    let meta = manifest.episode;
                    let role = catalog.get(&meta.task).map_err(|e| FormatError::Manifest {
                        path: dir.join(MANIFEST_FILE),
                        message: e.to_string(),
                    })?;
                    episodes.push(EpisodeRef {
                        dir,
                        label: role.role.into(),
                        transitions: manifest.transition_count,
                        meta,
                    });
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            episodes,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn episodes(&self) -> &[EpisodeRef] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn counts_by_task(&self) -> BTreeMap<TaskId, usize> {
        let mut m = BTreeMap::new();
        for e in &self.episodes {
            *m.entry(e.meta.task.clone()).or_insert(0) += 1;
        }
        m
    }

    pub fn with_label(&self, label: SourceLabel) -> impl Iterator<Item = &EpisodeRef> {
        self.episodes.iter().filter(move |e| e.label == label)
    }

    pub fn for_task<'a>(&'a self, task: &'a TaskId) -> impl Iterator<Item = &'a EpisodeRef> {
        self.episodes.iter().filter(move |e| &e.meta.task == task)
    }
}
