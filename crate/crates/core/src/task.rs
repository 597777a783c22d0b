//! Task specifications, staged success predicates, scoring and HUD events.
//!
//! A task is an ordered list of stages. Stage `k` can only be achieved once
//! stages `0..k` are, and once achieved it stays achieved for the rest of
//! the attempt. Some predicates need memory across ticks ("was this object
//! ever lifted", "was it ever scanned"); that memory lives next to the stage
//! results in [`AttemptProgress`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::ArmState;
use crate::geometry::{angle_between, wrap_angle, Aabb};
use crate::scene::{GoalKind, GoalSpec, GoalTarget, ObjectClass, RandomizationSpec, SceneObject, SceneState, Shape, TABLE_Z};

/// Points per achieved stage.
pub const POINTS_PER_STAGE: u64 = 100;
/// Points per started 10 s of time left when every stage is achieved.
pub const COMPLETION_BONUS_PER_SLICE: u64 = 100;
pub const COMPLETION_BONUS_SLICE_S: f64 = 10.0;
/// Fraction of the time limit at which the time warning fires.
pub const TIME_WARNING_FRACTION: f64 = 0.75;

pub const DEFAULT_REACH_DISTANCE: f64 = 0.04;
pub const DEFAULT_LIFT: f64 = 0.02;
pub const DEFAULT_POSITION_TOLERANCE: f64 = 0.03;
pub const DEFAULT_YAW_TOLERANCE_DEG: f64 = 15.0;
pub const DEFAULT_CONE_HALF_ANGLE_DEG: f64 = 30.0;
pub const DEFAULT_SCAN_ZONE_SIZE: f64 = 0.15;
pub const DEFAULT_MAX_LID_ANGLE: f64 = 0.1;
pub const DEFAULT_COLLINEARITY: f64 = 0.02;
pub const DEFAULT_SPACING_TOLERANCE: f64 = 0.03;

/// Task identifier; the six shipped tasks have constants on this type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub String);

impl TaskId {
    pub const SCENE_TWINS: &'static str = "SceneTwins";
    pub const GROCERY_CHECKOUT: &'static str = "GroceryCheckout";
    pub const ANIMAL_DORMS: &'static str = "AnimalDorms";
    pub const ARRANGE_DESK: &'static str = "ArrangeDesk";
    pub const SCAN_BOTTLE: &'static str = "ScanBottle";
    pub const PACK_BOX: &'static str = "PackBox";

    pub fn new(s: impl Into<String>) -> Self {
        TaskId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId(s.to_string())
    }
}

/// Whether a task is a gamified support task or a plain target task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    Support,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Picked,
    PlacedInZone,
    PlacedMatchingPose,
    Scanned,
    InsertedColorMatch,
    LidClosed,
    Reached,
}

/// How many of a stage's objects must satisfy the predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Quota {
    AtLeast(u32),
    Every(AllMarker),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllMarker {
    All,
}

impl Default for Quota {
    fn default() -> Self {
        Quota::AtLeast(1)
    }
}

impl Quota {
    fn required(&self, n_objects: usize) -> usize {
        match *self {
            Quota::AtLeast(n) => n as usize,
            Quota::Every(_) => n_objects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePredicate {
    pub id: String,
    pub kind: StageKind,
    /// Objects the predicate is evaluated on. Empty means "every goal entry".
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default)]
    pub count: Quota,
    /// Zone for `placed_in_zone` when not taken from the goal.
    #[serde(default)]
    pub zone: Option<Aabb>,
    /// Container id for `placed_in_zone` when not taken from the goal.
    #[serde(default)]
    pub container: Option<String>,
    /// Scanner id for `scanned` when not taken from the goal.
    #[serde(default)]
    pub scanner: Option<String>,
    #[serde(default)]
    pub distance: Option<f64>,
    #[serde(default)]
    pub lift: Option<f64>,
    #[serde(default)]
    pub position_tolerance: Option<f64>,
    #[serde(default)]
    pub yaw_tolerance_deg: Option<f64>,
    #[serde(default)]
    pub cone_half_angle_deg: Option<f64>,
    #[serde(default)]
    pub zone_size: Option<f64>,
    /// Scan zone center in the scanner frame.
    #[serde(default)]
    pub zone_offset: Option<[f64; 3]>,
    #[serde(default)]
    pub max_lid_angle: Option<f64>,
    #[serde(default)]
    pub collinearity: Option<f64>,
    #[serde(default)]
    pub spacing_tolerance: Option<f64>,
}

impl StagePredicate {
    fn tolerances(&self) -> [(&'static str, Option<f64>); 10] {
        [
            ("distance", self.distance),
            ("lift", self.lift),
            ("position_tolerance", self.position_tolerance),
            ("yaw_tolerance_deg", self.yaw_tolerance_deg),
            ("cone_half_angle_deg", self.cone_half_angle_deg),
            ("zone_size", self.zone_size),
            ("max_lid_angle", self.max_lid_angle),
            ("collinearity", self.collinearity),
            ("spacing_tolerance", self.spacing_tolerance),
            ("zone_offset", self.zone_offset.map(|_| 1.0)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: String,
    pub achieved: bool,
    pub t_achieved: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Success,
    Timeout,
    Incomplete,
}

/// What happened, for the HUD. Serialized with a `kind` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GameEventKind {
    GraspHighlight { object: String },
    ScanBeep { object: String },
    ReceiptCheck { object: String, index: u32 },
    Confetti,
    StageComplete { stage: String, index: u32 },
    TimeWarning { remaining: f64 },
    Timeout,
    AttemptStart { attempt: u32 },
    AttemptEnd { attempt: u32, outcome: AttemptOutcome, points: u64 },
    /// Non-fatal server notice (for example, recording disabled).
    Warning { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameEvent {
    pub t: f64,
    #[serde(flatten)]
    pub kind: GameEventKind,
}

impl GameEvent {
    pub fn new(t: f64, kind: GameEventKind) -> Self {
        Self { t, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    pub role: TaskRole,
    pub narrative: String,
    /// Seconds.
    pub time_limit: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(rename = "stage")]
    pub stages: Vec<StagePredicate>,
    pub randomization: RandomizationSpec,
}

fn default_max_attempts() -> u32 {
    3
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task {task}: {message}")]
    Invalid { task: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("goal kind {0:?} has no overlay")]
    UnsupportedGoalKind(GoalKind),
    #[error("goal kind {goal:?} does not belong to task {task}")]
    GoalMismatch { task: TaskId, goal: GoalKind },
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TaskSpec {
    pub fn from_toml(text: &str) -> Result<Self, TaskError> {
        let spec: TaskSpec = toml::from_str(text).map_err(|e| TaskError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let spec: TaskSpec = toml::from_str(&text).map_err(|e| TaskError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let invalid = |message: String| TaskError::Invalid {
            task: self.id.0.clone(),
            message,
        };
        if self.stages.is_empty() {
            return Err(invalid("stages must not be empty".into()));
        }
        if !(self.time_limit.is_finite() && self.time_limit > 0.0) {
            return Err(invalid("time_limit must be positive".into()));
        }
        if self.max_attempts == 0 {
            return Err(invalid("max_attempts must be at least 1".into()));
        }
        self.randomization.validate().map_err(|e| invalid(e.to_string()))?;
        let ids: BTreeSet<&str> = self.randomization.objects.iter().map(|o| o.id.as_str()).collect();
        let mut stage_ids = BTreeSet::new();
        for s in &self.stages {
            if !stage_ids.insert(s.id.as_str()) {
                return Err(invalid(format!("duplicate stage id {}", s.id)));
            }
            for (name, v) in s.tolerances() {
                if let Some(v) = v {
                    if !(v.is_finite() && v > 0.0) {
                        return Err(invalid(format!("stage {}: {name} must be strictly positive", s.id)));
                    }
                }
            }
            for o in s.objects.iter().chain(&s.container).chain(&s.scanner) {
                if !ids.contains(o.as_str()) {
                    return Err(invalid(format!("stage {} references unknown object {o}", s.id)));
                }
            }
            if let Quota::AtLeast(0) = s.count {
                return Err(invalid(format!("stage {}: count must be at least 1", s.id)));
            }
        }
        Ok(())
    }

    pub fn gamified(&self) -> bool {
        self.role == TaskRole::Support
    }
}

/// Stage results plus the per-object memory some predicates need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptProgress {
    pub stages: Vec<StageResult>,
    /// Objects that have been lifted at some point this attempt.
    pub picked: BTreeSet<String>,
    /// Objects that have been scanned at some point this attempt.
    pub scanned: BTreeSet<String>,
}

impl AttemptProgress {
    pub fn new(spec: &TaskSpec) -> Self {
        Self {
            stages: spec
                .stages
                .iter()
                .map(|s| StageResult {
                    stage: s.id.clone(),
                    achieved: false,
                    t_achieved: None,
                })
                .collect(),
            picked: BTreeSet::new(),
            scanned: BTreeSet::new(),
        }
    }

    pub fn achieved(&self) -> usize {
        self.stages.iter().filter(|s| s.achieved).count()
    }

    pub fn complete(&self) -> bool {
        self.stages.iter().all(|s| s.achieved)
    }
}

fn subjects<'a>(stage: &'a StagePredicate, goal: &'a GoalSpec) -> Vec<&'a str> {
    if stage.objects.is_empty() {
        goal.entries.iter().map(|e| e.object.as_str()).collect()
    } else {
        stage.objects.iter().map(String::as_str).collect()
    }
}

fn goal_target<'a>(goal: &'a GoalSpec, object: &str) -> Option<&'a GoalTarget> {
    goal.entries.iter().find(|e| e.object == object).map(|e| &e.target)
}

fn is_lifted(o: &SceneObject, lift: f64) -> bool {
    o.attached && o.base_z() >= TABLE_Z + lift
}

/// Scan zone and the direction a barcode must face to be read.
pub fn scan_geometry(scanner: &SceneObject, stage: &StagePredicate) -> (Aabb, Vector3<f64>) {
    let size = stage.zone_size.unwrap_or(DEFAULT_SCAN_ZONE_SIZE);
    let offset = stage.zone_offset.unwrap_or([0.12, 0.0, 0.09]);
    let c = scanner.pose.transform_point(&Vector3::from(offset));
    // The lens looks along the scanner's +x axis; the barcode must point back at it.
    let facing = -scanner.pose.rotate(&Vector3::x());
    (Aabb::cube([c.x, c.y, c.z], size), facing)
}

fn is_scanned(o: &SceneObject, scanner: &SceneObject, stage: &StagePredicate) -> bool {
    let Some(axis) = o.barcode_axis else {
        return false;
    };
    let (zone, facing) = scan_geometry(scanner, stage);
    let half_angle = stage.cone_half_angle_deg.unwrap_or(DEFAULT_CONE_HALF_ANGLE_DEG).to_radians();
    zone.contains(&o.center()) && angle_between(&o.pose.rotate(&axis), &facing) <= half_angle
}

fn distance_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + s * dx, a[1] + s * dy);
    ((p[0] - cx).hypot(p[1] - cy), s * len2.sqrt())
}

/// Number of subjects satisfying a placement predicate, with line spacing applied.
fn count_placed(stage: &StagePredicate, scene: &SceneState, subjects: &[&str]) -> usize {
    let goal = &scene.goal;
    let mut on_line: Vec<(f64, f64)> = Vec::new();
    let mut count = 0;
    for id in subjects {
        let Some(o) = scene.object(id) else { continue };
        if o.attached {
            continue;
        }
        let ok = match (stage.kind, &stage.zone, &stage.container, goal_target(goal, id)) {
            (StageKind::PlacedInZone, Some(zone), _, _) => zone.contains(&o.center()),
            (StageKind::PlacedInZone, None, Some(c), _) => o.container.as_deref() == Some(c),
            (StageKind::PlacedInZone, None, None, Some(GoalTarget::Container { id })) => {
                o.container.as_deref() == Some(id.as_str())
            }
            (StageKind::PlacedInZone, None, None, Some(GoalTarget::Line { start, end, spacing })) => {
                let tol = stage.collinearity.unwrap_or(DEFAULT_COLLINEARITY);
                let (d, along) = distance_to_segment([o.center().x, o.center().y], *start, *end);
                if d < tol && o.container.is_none() {
                    on_line.push((along, *spacing));
                    true
                } else {
                    false
                }
            }
            (StageKind::PlacedMatchingPose, _, _, Some(GoalTarget::Pose { x, y, yaw })) => {
                let pos_tol = stage.position_tolerance.unwrap_or(DEFAULT_POSITION_TOLERANCE);
                let yaw_tol = stage.yaw_tolerance_deg.unwrap_or(DEFAULT_YAW_TOLERANCE_DEG).to_radians();
                let c = o.center();
                (c.x - x).hypot(c.y - y) <= pos_tol && wrap_angle(o.pose.yaw() - yaw).abs() <= yaw_tol
            }
            (StageKind::InsertedColorMatch, ..) => o
                .container
                .as_deref()
                .and_then(|c| scene.object(c))
                .is_some_and(|c| c.color_tag.is_some() && c.color_tag == o.color_tag),
            _ => false,
        };
        if ok {
            count += 1;
        }
    }
    if on_line.len() >= 2 {
        on_line.sort_by(|a, b| a.0.total_cmp(&b.0));
        let tol = stage.spacing_tolerance.unwrap_or(DEFAULT_SPACING_TOLERANCE);
        let spaced = on_line.windows(2).all(|w| ((w[1].0 - w[0].0) - w[0].1).abs() <= tol);
        if !spaced {
            count -= on_line.len() - 1;
        }
    }
    count
}

fn find_scanner<'a>(stage: &StagePredicate, scene: &'a SceneState, object: &str) -> Option<&'a SceneObject> {
    let id = match (&stage.scanner, goal_target(&scene.goal, object)) {
        (Some(s), _) => s.as_str(),
        (None, Some(GoalTarget::Scanner { id })) => id.as_str(),
        _ => return scene.objects.iter().find(|o| o.class == ObjectClass::Scanner),
    };
    scene.object(id)
}

/// Updates stage latches for the current tick and returns the HUD events.
///
/// Achieved stages never revert. Stages are achieved strictly in order; more
/// than one can complete on the same tick.
pub fn evaluate_stages(
    spec: &TaskSpec,
    scene: &SceneState,
    arm: &ArmState,
    prior: &AttemptProgress,
    t: f64,
) -> (AttemptProgress, Vec<GameEvent>) {
    let mut next = prior.clone();
    let mut events = Vec::new();
    let ee = arm.ee_pose().position;

    // Object-level memory first, so stages see this tick's observations.
    for stage in &spec.stages {
        for id in subjects(stage, &scene.goal) {
            let Some(o) = scene.object(id) else { continue };
            match stage.kind {
                StageKind::Picked if is_lifted(o, stage.lift.unwrap_or(DEFAULT_LIFT)) => {
                    next.picked.insert(id.to_string());
                }
                StageKind::Scanned => {
                    let scanned = find_scanner(stage, scene, id).is_some_and(|s| is_scanned(o, s, stage));
                    if scanned && next.scanned.insert(id.to_string()) && scene.goal.kind == GoalKind::ReceiptList {
                        let index = match goal_target(&scene.goal, id) {
                            Some(GoalTarget::Order { index }) => *index,
                            _ => 0,
                        };
                        events.push(GameEvent::new(t, GameEventKind::ScanBeep { object: id.to_string() }));
                        events.push(GameEvent::new(
                            t,
                            GameEventKind::ReceiptCheck {
                                object: id.to_string(),
                                index,
                            },
                        ));
                        events.push(GameEvent::new(t, GameEventKind::Confetti));
                    }
                }
                _ => {}
            }
        }
    }

    let mut newly_complete = false;
    for (index, stage) in spec.stages.iter().enumerate() {
        if next.stages[index].achieved {
            continue;
        }
        if index > 0 && !next.stages[index - 1].achieved {
            break;
        }
        let subj = subjects(stage, &scene.goal);
        let mut need = stage.count.required(subj.len());
        let have = match stage.kind {
            StageKind::Reached => {
                let d = stage.distance.unwrap_or(DEFAULT_REACH_DISTANCE);
                subj.iter()
                    .filter_map(|id| scene.object(id))
                    .filter(|o| (o.center() - ee).norm() <= d)
                    .count()
            }
            StageKind::Picked => subj.iter().filter(|id| next.picked.contains(**id)).count(),
            StageKind::Scanned => subj.iter().filter(|id| next.scanned.contains(**id)).count(),
            StageKind::LidClosed => {
                let max = stage.max_lid_angle.unwrap_or(DEFAULT_MAX_LID_ANGLE);
                need = 1;
                usize::from(scene.cardboard_box().is_some() && scene.lid_angle <= max)
            }
            StageKind::PlacedInZone | StageKind::PlacedMatchingPose | StageKind::InsertedColorMatch => {
                count_placed(stage, scene, &subj)
            }
        };
        if have >= need && need > 0 {
            next.stages[index].achieved = true;
            next.stages[index].t_achieved = Some(t);
            events.push(GameEvent::new(
                t,
                GameEventKind::StageComplete {
                    stage: stage.id.clone(),
                    index: index as u32,
                },
            ));
            newly_complete = true;
        } else {
            break;
        }
    }
    if newly_complete && next.complete() && spec.gamified() {
        events.push(GameEvent::new(t, GameEventKind::Confetti));
    }
    (next, events)
}

/// Points for one attempt: 100 per achieved stage, plus 100 per started
/// 10 s left on the clock when every stage was achieved.
pub fn score_attempt(spec: &TaskSpec, results: &[StageResult]) -> u64 {
    debug_assert_eq!(results.len(), spec.stages.len());
    let achieved = results.iter().filter(|r| r.achieved).count() as u64;
    let mut points = achieved * POINTS_PER_STAGE;
    if !results.is_empty() && results.iter().all(|r| r.achieved) {
        let finished = results
            .iter()
            .filter_map(|r| r.t_achieved)
            .fold(0.0_f64, f64::max);
        let remaining = (spec.time_limit - finished).max(0.0);
        points += COMPLETION_BONUS_PER_SLICE * (remaining / COMPLETION_BONUS_SLICE_S).ceil() as u64;
    }
    points
}

/// Table-plane outline of a target placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outline {
    pub object: String,
    pub polygon: Vec<[f64; 2]>,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiptRow {
    pub object: String,
    pub label: String,
    pub checked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Swatch {
    pub container: String,
    pub color: crate::scene::ColorTag,
    pub rgb: [u8; 3],
}

/// Render-agnostic description of the goal for the HUD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OverlayPayload {
    Outlines { outlines: Vec<Outline> },
    Receipt { rows: Vec<ReceiptRow> },
    Swatches { swatches: Vec<Swatch> },
}

fn outline_polygon(shape: &Shape, x: f64, y: f64, yaw: f64) -> Vec<[f64; 2]> {
    let local: Vec<[f64; 2]> = match *shape {
        Shape::Cuboid { half_extents: h } => vec![[-h[0], -h[1]], [h[0], -h[1]], [h[0], h[1]], [-h[0], h[1]]],
        Shape::Cylinder { radius, .. } => (0..12)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 12.0;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect(),
    };
    let (s, c) = yaw.sin_cos();
    local
        .into_iter()
        .map(|[u, v]| [x + c * u - s * v, y + s * u + c * v])
        .collect()
}

/// Builds the goal overlay for support tasks.
///
/// Target tasks have no overlay and return [`TaskError::UnsupportedGoalKind`].
pub fn goal_overlay(
    spec: &TaskSpec,
    goal: &GoalSpec,
    scene: &SceneState,
    scanned: &BTreeSet<String>,
) -> Result<OverlayPayload, TaskError> {
    if goal.kind != spec.randomization.goal.kind {
        return Err(TaskError::GoalMismatch {
            task: spec.id.clone(),
            goal: goal.kind,
        });
    }
    let shape_of = |id: &str| {
        scene
            .object(id)
            .map(|o| o.shape)
            .or_else(|| spec.randomization.objects.iter().find(|p| p.id == id).map(|p| p.shape))
    };
    match goal.kind {
        GoalKind::SceneLayout => {
            let outlines = goal
                .entries
                .iter()
                .filter_map(|e| match e.target {
                    GoalTarget::Pose { x, y, yaw } => Some(Outline {
                        object: e.object.clone(),
                        polygon: shape_of(&e.object)
                            .map(|s| outline_polygon(&s, x, y, yaw))
                            .unwrap_or_default(),
                        yaw,
                    }),
                    _ => None,
                })
                .collect();
            Ok(OverlayPayload::Outlines { outlines })
        }
        GoalKind::ReceiptList => {
            let mut rows: Vec<(u32, ReceiptRow)> = goal
                .entries
                .iter()
                .map(|e| {
                    let order = match e.target {
                        GoalTarget::Order { index } => index,
                        _ => 0,
                    };
                    let label = scene
                        .object(&e.object)
                        .and_then(|o| o.variant.clone())
                        .unwrap_or_else(|| e.object.clone());
                    (
                        order,
                        ReceiptRow {
                            object: e.object.clone(),
                            label,
                            checked: scanned.contains(&e.object),
                        },
                    )
                })
                .collect();
            rows.sort_by_key(|(o, _)| *o);
            Ok(OverlayPayload::Receipt {
                rows: rows.into_iter().map(|(_, r)| r).collect(),
            })
        }
        GoalKind::ColorMatch => {
            let swatches = scene
                .objects
                .iter()
                .filter(|o| o.class.is_container())
                .filter_map(|o| {
                    o.color_tag.map(|c| Swatch {
                        container: o.id.clone(),
                        color: c,
                        rgb: c.rgb(),
                    })
                })
                .collect();
            Ok(OverlayPayload::Swatches { swatches })
        }
        other => Err(TaskError::UnsupportedGoalKind(other)),
    }
}

/// All task specs the server knows, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct TaskCatalog {
    tasks: BTreeMap<TaskId, TaskSpec>,
}

const BUILTIN_TASKS: [&str; 6] = [
    include_str!("../../../config/tasks/scene_twins.toml"),
    include_str!("../../../config/tasks/grocery_checkout.toml"),
    include_str!("../../../config/tasks/animal_dorms.toml"),
    include_str!("../../../config/tasks/arrange_desk.toml"),
    include_str!("../../../config/tasks/scan_bottle.toml"),
    include_str!("../../../config/tasks/pack_box.toml"),
];

impl TaskCatalog {
    pub fn new(specs: impl IntoIterator<Item = TaskSpec>) -> Self {
        Self {
            tasks: specs.into_iter().map(|s| (s.id.clone(), s)).collect(),
        }
    }

    /// The six shipped tasks.
    pub fn builtin() -> Self {
        Self::new(
            BUILTIN_TASKS
                .iter()
                .map(|t| TaskSpec::from_toml(t).expect("shipped task spec is valid")),
        )
    }

    /// Loads every `*.toml` file in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Self, TaskError> {
        let rd = std::fs::read_dir(dir).map_err(|source| TaskError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut paths: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "toml"))
            .collect();
        paths.sort();
        let specs = paths.iter().map(|p| TaskSpec::load(p)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(specs))
    }

    pub fn get(&self, id: &TaskId) -> Result<&TaskSpec, TaskError> {
        self.tasks.get(id).ok_or_else(|| TaskError::UnknownTask(id.clone()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &TaskId> {
        self.tasks.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.values()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}
