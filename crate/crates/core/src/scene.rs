//! Objects on the table, the magnetic grasp, seeded layout randomization and
//! the box lid.
//!
//! Geometry is primitive-only (boxes and cylinders). A closing gripper
//! attaches the nearest graspable object whose center lies within its grasp
//! radius of the grip point; the object then rides rigidly with the end
//! effector until released, at which point it drops upright onto whatever
//! support lies beneath it.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{Aabb, Pose3};

/// Height of the table plane.
pub const TABLE_Z: f64 = 0.0;
/// Default magnetic grasp radius in meters.
pub const DEFAULT_GRASP_RADIUS: f64 = 0.03;
/// Default minimum gap between object footprints when sampling layouts.
pub const DEFAULT_CLEARANCE: f64 = 0.06;
/// Rejection-sampling attempts per object before a layout is declared infeasible.
pub const MAX_PLACEMENT_ATTEMPTS: u32 = 1000;
/// Container floors sit this far above the table.
pub const CONTAINER_FLOOR: f64 = 0.005;
/// Lid angle (rad above the box top) below which a box counts as shut for drops.
pub const LID_SHUT_FOR_DROP: f64 = 0.5;
/// Smallest lid angle reachable while the tape roll is off-center.
pub const LID_BLOCKED_ANGLE: f64 = 0.3;
/// Fraction of the box footprint (per axis, centered) the tape must sit in for the lid to shut.
pub const LID_INNER_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    AnimalBlock,
    GroceryItem,
    AnimalToy,
    HouseBox,
    UsbAdapter,
    Mouse,
    Mug,
    ThreadlockerBottle,
    TapeRoll,
    CardboardBox,
    BoxLid,
    Basket,
    Scanner,
}

impl ObjectClass {
    pub fn is_container(self) -> bool {
        matches!(self, ObjectClass::HouseBox | ObjectClass::CardboardBox | ObjectClass::Basket)
    }

    fn default_rgb(self) -> [u8; 3] {
        match self {
            ObjectClass::AnimalBlock => [230, 180, 60],
            ObjectClass::GroceryItem => [240, 240, 230],
            ObjectClass::AnimalToy => [200, 120, 80],
            ObjectClass::HouseBox => [180, 180, 180],
            ObjectClass::UsbAdapter => [40, 40, 40],
            ObjectClass::Mouse => [90, 90, 100],
            ObjectClass::Mug => [220, 220, 255],
            ObjectClass::ThreadlockerBottle => [200, 30, 30],
            ObjectClass::TapeRoll => [20, 20, 20],
            ObjectClass::CardboardBox | ObjectClass::BoxLid => [170, 130, 80],
            ObjectClass::Basket => [60, 120, 200],
            ObjectClass::Scanner => [30, 30, 30],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorTag {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl ColorTag {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorTag::Red => [220, 40, 40],
            ColorTag::Green => [40, 180, 60],
            ColorTag::Blue => [40, 80, 220],
            ColorTag::Yellow => [240, 210, 40],
            ColorTag::Purple => [140, 60, 180],
            ColorTag::Orange => [245, 140, 30],
        }
    }
}

/// Bounding primitive in the object frame, centered on the object origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Cuboid { half_extents: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    pub fn half_height(&self) -> f64 {
        match *self {
            Shape::Cuboid { half_extents } => half_extents[2],
            Shape::Cylinder { half_height, .. } => half_height,
        }
    }

    /// Radius of the circle enclosing the footprint for any yaw.
    pub fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Cuboid { half_extents } => half_extents[0].hypot(half_extents[1]),
            Shape::Cylinder { radius, .. } => radius,
        }
    }

    /// Half sizes of the footprint at zero yaw.
    pub fn footprint_half(&self) -> [f64; 2] {
        match *self {
            Shape::Cuboid { half_extents } => [half_extents[0], half_extents[1]],
            Shape::Cylinder { radius, .. } => [radius, radius],
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            Shape::Cuboid { half_extents } => half_extents.iter().all(|h| h.is_finite() && *h > 0.0),
            Shape::Cylinder { radius, half_height } => {
                radius.is_finite() && radius > 0.0 && half_height.is_finite() && half_height > 0.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub class: ObjectClass,
    /// Variant label drawn during randomization, e.g. which animal.
    pub variant: Option<String>,
    pub pose: Pose3,
    pub shape: Shape,
    pub grasp_radius: f64,
    pub graspable: bool,
    pub attached: bool,
    pub color_tag: Option<ColorTag>,
    /// Unit vector in the object frame that must face a scanner.
    pub barcode_axis: Option<Vector3<f64>>,
    /// Id of the container this object was released into.
    pub container: Option<String>,
}

impl SceneObject {
    pub fn center(&self) -> Vector3<f64> {
        self.pose.position
    }

    /// Height of the object's lowest point for an upright pose.
    pub fn base_z(&self) -> f64 {
        self.pose.position.z - self.shape.half_height()
    }

    /// Footprint of an upright, unrotated container.
    pub fn footprint(&self) -> Aabb {
        let [hx, hy] = self.shape.footprint_half();
        let p = self.pose.position;
        let top = p.z + self.shape.half_height();
        Aabb::new([p.x - hx, p.y - hy, TABLE_Z], [p.x + hx, p.y + hy, top])
    }

    pub fn top_z(&self) -> f64 {
        self.pose.position.z + self.shape.half_height()
    }

    pub fn rgb(&self) -> [u8; 3] {
        self.color_tag.map(ColorTag::rgb).unwrap_or_else(|| self.class.default_rgb())
    }
}

/// Kinds of goals a task can generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalKind {
    SceneLayout,
    ReceiptList,
    ColorMatch,
    LineArrangement,
    ScanTarget,
    PackTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GoalTarget {
    /// Table-plane target `(x, y, yaw)`.
    Pose { x: f64, y: f64, yaw: f64 },
    /// Position in a receipt or sequence.
    Order { index: u32 },
    Container { id: String },
    Scanner { id: String },
    Line {
        start: [f64; 2],
        end: [f64; 2],
        spacing: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalEntry {
    pub object: String,
    pub target: GoalTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub kind: GoalKind,
    pub entries: Vec<GoalEntry>,
}

/// The active grasp: which object and where it sits in the end-effector frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub object: String,
    pub offset: Pose3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub objects: Vec<SceneObject>,
    /// Lid angle above the box top; π/2 is fully open, 0 is shut.
    pub lid_angle: f64,
    pub seed: u64,
    pub goal: GoalSpec,
    pub grasp: Option<Grasp>,
}

impl SceneState {
    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: &str) -> Option<&mut SceneObject> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn attached(&self) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.attached)
    }

    pub fn cardboard_box(&self) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.class == ObjectClass::CardboardBox)
    }

    /// Moves the attached object, if any, rigidly with the end effector.
    pub fn carry(&mut self, ee: &Pose3) {
        if let Some(grasp) = &self.grasp {
            let pose = ee.compose(&grasp.offset);
            let id = grasp.object.clone();
            if let Some(obj) = self.object_mut(&id) {
                obj.pose = pose;
            }
        }
    }

    /// Content hash over every field, bit-exact on floats.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let f = |h: &mut Sha256, v: f64| h.update(v.to_bits().to_le_bytes());
        h.update(self.seed.to_le_bytes());
        f(&mut h, self.lid_angle);
        for o in &self.objects {
            h.update(o.id.as_bytes());
            h.update([0]);
            h.update([o.attached as u8, o.graspable as u8]);
            for v in o.pose.to_array() {
                f(&mut h, v);
            }
            h.update(o.container.as_deref().unwrap_or("").as_bytes());
            h.update([0]);
        }
        if let Some(g) = &self.grasp {
            h.update(g.object.as_bytes());
            for v in g.offset.to_array() {
                f(&mut h, v);
            }
        }
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("could not place object {object} after {attempts} attempts")]
    PlacementInfeasible { object: String, attempts: u32 },
    #[error("invalid randomization spec: {0}")]
    InvalidSpec(String),
}

/// One visual/semantic variant an object may take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub color: Option<ColorTag>,
    #[serde(default)]
    pub shape: Option<Shape>,
}

/// How one object is placed at the start of an attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectPlacement {
    pub id: String,
    pub class: ObjectClass,
    pub shape: Shape,
    /// Table-plane box `[x, y]` the center is sampled from.
    pub region_min: [f64; 2],
    pub region_max: [f64; 2],
    #[serde(default)]
    pub yaw: [f64; 2],
    #[serde(default = "default_true")]
    pub graspable: bool,
    #[serde(default = "default_grasp_radius")]
    pub grasp_radius: f64,
    #[serde(default)]
    pub color: Option<ColorTag>,
    #[serde(default)]
    pub barcode_axis: Option<[f64; 3]>,
    #[serde(default)]
    pub variants: Vec<Variant>,
}

fn default_true() -> bool {
    true
}

fn default_grasp_radius() -> f64 {
    DEFAULT_GRASP_RADIUS
}

fn default_clearance() -> f64 {
    DEFAULT_CLEARANCE
}

/// Goal generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalGenerator {
    pub kind: GoalKind,
    /// Objects the goal is about.
    pub objects: Vec<String>,
    /// Scene layouts: region the target poses are drawn from.
    #[serde(default)]
    pub region_min: Option<[f64; 2]>,
    #[serde(default)]
    pub region_max: Option<[f64; 2]>,
    #[serde(default)]
    pub yaw: Option<[f64; 2]>,
    /// Line arrangements: the line and the spacing between neighbours.
    #[serde(default)]
    pub line_start: Option<[f64; 2]>,
    #[serde(default)]
    pub line_end: Option<[f64; 2]>,
    #[serde(default)]
    pub spacing: Option<f64>,
    /// Scan / pack targets: the scanner or container.
    #[serde(default)]
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomizationSpec {
    #[serde(rename = "object")]
    pub objects: Vec<ObjectPlacement>,
    #[serde(default = "default_clearance")]
    pub clearance: f64,
    pub goal: GoalGenerator,
}

impl RandomizationSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        if self.objects.is_empty() {
            return bad("no objects".into());
        }
        if !(self.clearance.is_finite() && self.clearance >= 0.0) {
            return bad("clearance must be non-negative".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for o in &self.objects {
            if !seen.insert(o.id.as_str()) {
                return bad(format!("duplicate object id {}", o.id));
            }
            if !o.shape.is_valid() || o.variants.iter().any(|v| v.shape.is_some_and(|s| !s.is_valid())) {
                return bad(format!("{}: shape sizes must be positive", o.id));
            }
            if (0..2).any(|i| !(o.region_min[i] <= o.region_max[i])) || o.yaw[0] > o.yaw[1] {
                return bad(format!("{}: region or yaw range is inverted", o.id));
            }
            if !(o.grasp_radius > 0.0) {
                return bad(format!("{}: grasp_radius must be positive", o.id));
            }
            if let Some(a) = o.barcode_axis {
                if Vector3::from(a).norm() < 1e-9 {
                    return bad(format!("{}: barcode_axis must be nonzero", o.id));
                }
            }
        }
        for id in self.goal.objects.iter().chain(self.goal.target.iter()) {
            if !seen.contains(id.as_str()) {
                return bad(format!("goal references unknown object {id}"));
            }
        }
        Ok(())
    }
}

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

struct Footprint {
    xy: [f64; 2],
    radius: f64,
}

fn fits(placed: &[Footprint], xy: [f64; 2], radius: f64, clearance: f64) -> bool {
    placed.iter().all(|p| {
        let d = (p.xy[0] - xy[0]).hypot(p.xy[1] - xy[1]);
        d - p.radius - radius >= clearance
    })
}

/// Samples an initial layout and matching goal. Deterministic in `seed`.
pub fn randomize_scene(spec: &RandomizationSpec, seed: u64) -> Result<SceneState, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::with_capacity(spec.objects.len());
    let mut placed: Vec<Footprint> = Vec::new();
    for p in &spec.objects {
        let variant = if p.variants.is_empty() {
            None
        } else {
            Some(&p.variants[rng.random_range(0..p.variants.len())])
        };
        let shape = variant.and_then(|v| v.shape).unwrap_or(p.shape);
        let color = variant.and_then(|v| v.color).or(p.color);
        let radius = shape.footprint_radius();
        let mut xy = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cand = [
                sample_range(&mut rng, p.region_min[0], p.region_max[0]),
                sample_range(&mut rng, p.region_min[1], p.region_max[1]),
            ];
            if fits(&placed, cand, radius, spec.clearance) {
                xy = Some(cand);
                break;
            }
        }
        let xy = xy.ok_or_else(|| SceneError::PlacementInfeasible {
            object: p.id.clone(),
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        let yaw = sample_range(&mut rng, p.yaw[0], p.yaw[1]);
        placed.push(Footprint { xy, radius });
        objects.push(SceneObject {
            id: p.id.clone(),
            class: p.class,
            variant: variant.map(|v| v.name.clone()),
            pose: Pose3::from_xyz_yaw(xy[0], xy[1], TABLE_Z + shape.half_height(), yaw),
            shape,
            grasp_radius: p.grasp_radius,
            graspable: p.graspable,
            attached: false,
            color_tag: color,
            barcode_axis: p.barcode_axis.map(|a| Vector3::from(a).normalize()),
            container: None,
        });
    }
    let goal = generate_goal(&spec.goal, &objects, spec.clearance, &mut rng)?;
    let lid_angle = if objects.iter().any(|o| o.class == ObjectClass::CardboardBox) {
        FRAC_PI_2
    } else {
        0.0
    };
    Ok(SceneState {
        objects,
        lid_angle,
        seed,
        goal,
        grasp: None,
    })
}

fn generate_goal(
    gen: &GoalGenerator,
    objects: &[SceneObject],
    clearance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GoalSpec, SceneError> {
    let find = |id: &str| objects.iter().find(|o| o.id == id);
    let missing = |what: &str| SceneError::InvalidSpec(format!("{:?} goal needs {what}", gen.kind));
    let entries = match gen.kind {
        GoalKind::SceneLayout => {
            let (lo, hi) = gen
                .region_min
                .zip(gen.region_max)
                .ok_or_else(|| missing("region_min/region_max"))?;
            let yaw = gen.yaw.unwrap_or([0.0, 0.0]);
            let mut placed = Vec::new();
            let mut entries = Vec::new();
            for id in &gen.objects {
                let radius = find(id).map(|o| o.shape.footprint_radius()).unwrap_or(0.0);
                let mut xy = None;
                for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                    let cand = [sample_range(rng, lo[0], hi[0]), sample_range(rng, lo[1], hi[1])];
                    if fits(&placed, cand, radius, clearance) {
                        xy = Some(cand);
                        break;
                    }
                }
                let xy = xy.ok_or_else(|| SceneError::PlacementInfeasible {
                    object: format!("goal:{id}"),
                    attempts: MAX_PLACEMENT_ATTEMPTS,
                })?;
                placed.push(Footprint { xy, radius });
                entries.push(GoalEntry {
                    object: id.clone(),
                    target: GoalTarget::Pose {
                        x: xy[0],
                        y: xy[1],
                        yaw: sample_range(rng, yaw[0], yaw[1]),
                    },
                });
            }
            entries
        }
        GoalKind::ReceiptList => gen
            .objects
            .iter()
            .enumerate()
            .map(|(i, id)| GoalEntry {
                object: id.clone(),
                target: GoalTarget::Order { index: i as u32 },
            })
            .collect(),
        GoalKind::ColorMatch => {
            let mut entries = Vec::new();
            for id in &gen.objects {
                let color = find(id)
                    .and_then(|o| o.color_tag)
                    .ok_or_else(|| missing("colored objects"))?;
                let home = objects
                    .iter()
                    .find(|o| o.class.is_container() && o.color_tag == Some(color))
                    .ok_or_else(|| SceneError::InvalidSpec(format!("no container colored {color:?}")))?;
                entries.push(GoalEntry {
                    object: id.clone(),
                    target: GoalTarget::Container { id: home.id.clone() },
                });
            }
            entries
        }
        GoalKind::LineArrangement => {
            let start = gen.line_start.ok_or_else(|| missing("line_start"))?;
            let end = gen.line_end.ok_or_else(|| missing("line_end"))?;
            let spacing = gen.spacing.ok_or_else(|| missing("spacing"))?;
            gen.objects
                .iter()
                .map(|id| GoalEntry {
                    object: id.clone(),
                    target: GoalTarget::Line { start, end, spacing },
                })
                .collect()
        }
        GoalKind::ScanTarget => {
            let target = gen.target.clone().ok_or_else(|| missing("target"))?;
            gen.objects
                .iter()
                .map(|id| GoalEntry {
                    object: id.clone(),
                    target: GoalTarget::Scanner { id: target.clone() },
                })
                .collect()
        }
        GoalKind::PackTarget => {
            let target = gen.target.clone().ok_or_else(|| missing("target"))?;
            gen.objects
                .iter()
                .map(|id| GoalEntry {
                    object: id.clone(),
                    target: GoalTarget::Container { id: target.clone() },
                })
                .collect()
        }
    };
    Ok(GoalSpec { kind: gen.kind, entries })
}

/// Attaches the nearest graspable object within reach of a closing gripper.
///
/// Ties in distance go to the lexicographically smallest id. Nothing happens
/// while the gripper is open or already holding something.
pub fn try_grasp(scene: &SceneState, ee: &Pose3, gripper_closing: bool) -> (SceneState, Option<String>) {
    let mut next = scene.clone();
    if !gripper_closing || scene.grasp.is_some() {
        return (next, None);
    }
    let best = scene
        .objects
        .iter()
        .filter(|o| o.graspable && !o.attached)
        .map(|o| ((o.center() - ee.position).norm(), o))
        .filter(|(d, o)| *d <= o.grasp_radius)
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.id.cmp(&b.id)));
    let Some((_, obj)) = best else {
        return (next, None);
    };
    let id = obj.id.clone();
    let offset = ee.inverse().compose(&obj.pose);
    let o = next.object_mut(&id).expect("object exists");
    o.attached = true;
    o.container = None;
    next.grasp = Some(Grasp {
        object: id.clone(),
        offset,
    });
    (next, Some(id))
}

/// Detaches the held object and drops it upright onto the support below.
///
/// Supports are open containers whose footprint contains the object center,
/// otherwise the table. No-op if nothing is held.
pub fn release(scene: &SceneState, ee: &Pose3) -> SceneState {
    let mut next = scene.clone();
    let Some(grasp) = next.grasp.take() else {
        return next;
    };
    let carried = ee.compose(&grasp.offset);
    let (x, y, yaw) = (carried.position.x, carried.position.y, carried.yaw());
    let half = next.object(&grasp.object).map(|o| o.shape.half_height()).unwrap_or(0.0);

    let mut support_z = TABLE_Z;
    let mut container = None;
    let mut containers: Vec<&SceneObject> = next
        .objects
        .iter()
        .filter(|o| o.class.is_container() && o.id != grasp.object && o.footprint().contains_xy(&carried.position))
        .collect();
    containers.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(c) = containers.first() {
        if c.class == ObjectClass::CardboardBox && next.lid_angle < LID_SHUT_FOR_DROP {
            support_z = c.top_z();
        } else {
            support_z = TABLE_Z + CONTAINER_FLOOR;
            container = Some(c.id.clone());
        }
    }

    let o = next.object_mut(&grasp.object).expect("grasped object exists");
    o.attached = false;
    o.container = container;
    o.pose = Pose3::from_xyz_yaw(x, y, support_z + half, yaw);
    next
}

/// Hinge geometry of the cardboard box lid in the box's y-z plane.
#[derive(Debug, Clone, Copy)]
pub struct LidHinge {
    pub hinge_y: f64,
    pub top_z: f64,
    pub length: f64,
    pub x_range: [f64; 2],
}

impl LidHinge {
    pub fn of(bx: &SceneObject) -> LidHinge {
        let fp = bx.footprint();
        LidHinge {
            hinge_y: fp.max[1],
            top_z: bx.top_z(),
            length: fp.max[1] - fp.min[1],
            x_range: [fp.min[0], fp.max[0]],
        }
    }

    /// Polar angle and radius of `p` about the hinge, measured from the box top
    /// toward the box interior.
    pub fn polar(&self, p: &Vector3<f64>) -> (f64, f64) {
        let dy = self.hinge_y - p.y;
        let dz = p.z - self.top_z;
        (dz.atan2(dy), dy.hypot(dz))
    }

    /// Tip of the lid for a given angle.
    pub fn tip(&self, angle: f64) -> (f64, f64) {
        (
            self.hinge_y - self.length * angle.cos(),
            self.top_z + self.length * angle.sin(),
        )
    }
}

/// Whether the tape roll currently permits the lid to shut.
pub fn lid_can_shut(scene: &SceneState) -> bool {
    let Some(bx) = scene.cardboard_box() else {
        return true;
    };
    let Some(tape) = scene.objects.iter().find(|o| o.class == ObjectClass::TapeRoll) else {
        return true;
    };
    let fp = bx.footprint();
    let c = fp.center();
    let e = fp.extent();
    let p = tape.center();
    (p.x - c[0]).abs() <= 0.5 * LID_INNER_FRACTION * e[0] && (p.y - c[1]).abs() <= 0.5 * LID_INNER_FRACTION * e[1]
}

/// Lets an empty gripper push the lid closed.
///
/// The lid only moves when the end effector arrives from the outside of the
/// lid (its previous polar angle about the hinge was at or above the lid)
/// and is now inside the lid's sweep; the lid then follows the end effector
/// down, never opening. While the tape is off-center the lid stops at
/// [`LID_BLOCKED_ANGLE`].
pub fn push_lid(scene: &SceneState, prev_ee: &Vector3<f64>, ee: &Vector3<f64>) -> SceneState {
    let mut next = scene.clone();
    if scene.grasp.is_some() {
        return next;
    }
    let Some(bx) = scene.cardboard_box() else {
        return next;
    };
    let hinge = LidHinge::of(bx);
    if ee.x < hinge.x_range[0] || ee.x > hinge.x_range[1] {
        return next;
    }
    let (prev_angle, _) = hinge.polar(prev_ee);
    let (angle, r) = hinge.polar(ee);
    const SLACK: f64 = 0.02;
    if prev_angle + 1e-9 < scene.lid_angle || angle >= scene.lid_angle || r > hinge.length + SLACK || r < SLACK {
        return next;
    }
    let floor = if lid_can_shut(scene) { 0.0 } else { LID_BLOCKED_ANGLE };
    next.lid_angle = angle.max(floor).min(scene.lid_angle);
    next
}

/// Lookup of objects by class, sorted by id.
pub fn objects_by_class(scene: &SceneState) -> BTreeMap<ObjectClass, Vec<&SceneObject>> {
    let mut map: BTreeMap<ObjectClass, Vec<&SceneObject>> = BTreeMap::new();
    for o in &scene.objects {
        map.entry(o.class).or_default().push(o);
    }
    for v in map.values_mut() {
        v.sort_by(|a, b| a.id.cmp(&b.id));
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(id: &str, x: f64, y: f64) -> SceneObject {
        SceneObject {
            id: id.into(),
            class: ObjectClass::AnimalBlock,
            variant: None,
            pose: Pose3::from_xyz_yaw(x, y, 0.025, 0.0),
            shape: Shape::Cuboid {
                half_extents: [0.025; 3],
            },
            grasp_radius: DEFAULT_GRASP_RADIUS,
            graspable: true,
            attached: false,
            color_tag: None,
            barcode_axis: None,
            container: None,
        }
    }

    fn container(id: &str, class: ObjectClass, x: f64, y: f64) -> SceneObject {
        SceneObject {
            id: id.into(),
            class,
            variant: None,
            pose: Pose3::from_xyz_yaw(x, y, 0.05, 0.0),
            shape: Shape::Cuboid {
                half_extents: [0.1, 0.08, 0.05],
            },
            grasp_radius: DEFAULT_GRASP_RADIUS,
            graspable: false,
            attached: false,
            color_tag: None,
            barcode_axis: None,
            container: None,
        }
    }

    fn scene(objects: Vec<SceneObject>) -> SceneState {
        SceneState {
            objects,
            lid_angle: FRAC_PI_2,
            seed: 0,
            goal: GoalSpec {
                kind: GoalKind::SceneLayout,
                entries: vec![],
            },
            grasp: None,
        }
    }

    fn spec_two(region: f64) -> RandomizationSpec {
        let obj = |id: &str| ObjectPlacement {
            id: id.into(),
            class: ObjectClass::AnimalBlock,
            shape: Shape::Cuboid {
                half_extents: [0.02; 3],
            },
            region_min: [0.4, 0.0],
            region_max: [0.4 + region, region],
            yaw: [-1.0, 1.0],
            graspable: true,
            grasp_radius: DEFAULT_GRASP_RADIUS,
            color: None,
            barcode_axis: None,
            variants: vec![],
        };
        RandomizationSpec {
            objects: vec![obj("a"), obj("b")],
            clearance: DEFAULT_CLEARANCE,
            goal: GoalGenerator {
                kind: GoalKind::ReceiptList,
                objects: vec!["a".into()],
                region_min: None,
                region_max: None,
                yaw: None,
                line_start: None,
                line_end: None,
                spacing: None,
                target: None,
            },
        }
    }

    #[test]
    fn randomize_is_deterministic() {
        let spec = spec_two(0.3);
        assert_eq!(randomize_scene(&spec, 7).unwrap(), randomize_scene(&spec, 7).unwrap());
        assert_ne!(randomize_scene(&spec, 7).unwrap(), randomize_scene(&spec, 8).unwrap());
    }

    #[test]
    fn degenerate_region_is_infeasible() {
        let spec = spec_two(0.01);
        assert!(matches!(
            randomize_scene(&spec, 1),
            Err(SceneError::PlacementInfeasible { ref object, .. }) if object == "b"
        ));
    }

    #[test]
    fn grasp_requires_closing_gripper() {
        let s = scene(vec![block("a", 0.5, 0.0)]);
        let ee = Pose3::from_xyz_yaw(0.5, 0.0, 0.03, 0.0);
        let (next, got) = try_grasp(&s, &ee, false);
        assert_eq!(got, None);
        assert_eq!(next, s);
    }

    #[test]
    fn grasp_out_of_reach() {
        let s = scene(vec![block("a", 0.5, 0.0)]);
        let ee = Pose3::from_xyz_yaw(0.5, 0.0, 0.025 + DEFAULT_GRASP_RADIUS + 1e-6, 0.0);
        assert_eq!(try_grasp(&s, &ee, true).1, None);
    }

    #[test]
    fn grasp_tie_breaks_on_id() {
        let s = scene(vec![block("zebra", 0.51, 0.0), block("ape", 0.49, 0.0)]);
        let ee = Pose3::from_xyz_yaw(0.5, 0.0, 0.025, 0.0);
        let (next, got) = try_grasp(&s, &ee, true);
        assert_eq!(got.as_deref(), Some("ape"));
        assert_eq!(next.objects.iter().filter(|o| o.attached).count(), 1);
        // A second grasp while holding is refused.
        let (again, got) = try_grasp(&next, &ee, true);
        assert_eq!(got, None);
        assert_eq!(again.objects.iter().filter(|o| o.attached).count(), 1);
    }

    #[test]
    fn carried_object_follows_end_effector() {
        let s = scene(vec![block("a", 0.5, 0.0)]);
        let ee = Pose3::from_xyz_yaw(0.5, 0.01, 0.04, 0.3);
        let (mut held, _) = try_grasp(&s, &ee, true);
        let moved = Pose3::from_xyz_yaw(0.3, -0.2, 0.2, -0.4);
        held.carry(&moved);
        let expected = moved.compose(&held.grasp.as_ref().unwrap().offset);
        assert_eq!(held.object("a").unwrap().pose, expected);
    }

    #[test]
    fn release_onto_table_and_into_container() {
        let s = scene(vec![block("a", 0.5, 0.0), container("box", ObjectClass::CardboardBox, 0.3, -0.3)]);
        let ee = Pose3::from_xyz_yaw(0.5, 0.0, 0.03, 0.0);
        let (held, _) = try_grasp(&s, &ee, true);

        let over_table = Pose3::from_xyz_yaw(0.6, 0.2, 0.3, 0.0);
        let mut on_table = held.clone();
        on_table.carry(&over_table);
        let on_table = release(&on_table, &over_table);
        let a = on_table.object("a").unwrap();
        assert!(!a.attached && on_table.grasp.is_none());
        assert!((a.base_z() - TABLE_Z).abs() < 1e-12);
        assert_eq!(a.container, None);

        let over_box = Pose3::from_xyz_yaw(0.32, -0.28, 0.3, 0.0);
        let mut in_box = held;
        in_box.carry(&over_box);
        let in_box = release(&in_box, &over_box);
        let a = in_box.object("a").unwrap();
        assert_eq!(a.container.as_deref(), Some("box"));
        assert!(in_box.object("box").unwrap().footprint().contains_xy(&a.center()));
    }

    #[test]
    fn release_without_grasp_is_noop() {
        let s = scene(vec![block("a", 0.5, 0.0)]);
        assert_eq!(release(&s, &Pose3::identity()), s);
    }

    #[test]
    fn lid_follows_pushing_gripper() {
        let s = scene(vec![container("box", ObjectClass::CardboardBox, 0.5, 0.0)]);
        let hinge = LidHinge::of(s.cardboard_box().unwrap());
        let at = |angle: f64, r: f64| {
            Vector3::new(0.5, hinge.hinge_y - r * angle.cos(), hinge.top_z + r * angle.sin())
        };
        let mut cur = s.clone();
        let mut prev = at(2.0, 0.1);
        let mut a = 2.0_f64;
        while a > 0.0 {
            a -= 0.02;
            let p = at(a.max(0.0), 0.1);
            cur = push_lid(&cur, &prev, &p);
            prev = p;
        }
        assert!(cur.lid_angle < 0.05, "lid at {}", cur.lid_angle);
    }

    #[test]
    fn lid_ignores_gripper_from_inside() {
        let s = scene(vec![container("box", ObjectClass::CardboardBox, 0.5, 0.0)]);
        let hinge = LidHinge::of(s.cardboard_box().unwrap());
        let inside = Vector3::new(0.5, hinge.hinge_y - 0.08, hinge.top_z + 0.05);
        let lower = Vector3::new(0.5, hinge.hinge_y - 0.09, hinge.top_z + 0.01);
        assert_eq!(push_lid(&s, &inside, &lower).lid_angle, s.lid_angle);
    }

    #[test]
    fn off_center_tape_blocks_lid() {
        let bx = container("box", ObjectClass::CardboardBox, 0.5, 0.0);
        let mut tape = block("tape", 0.5 + 0.09, 0.0);
        tape.class = ObjectClass::TapeRoll;
        let s = scene(vec![bx, tape]);
        assert!(!lid_can_shut(&s));
        let hinge = LidHinge::of(s.cardboard_box().unwrap());
        let prev = Vector3::new(0.5, hinge.hinge_y - 0.1 * 1.6f64.cos(), hinge.top_z + 0.1 * 1.6f64.sin());
        let now = Vector3::new(0.5, hinge.hinge_y - 0.1, hinge.top_z);
        assert_eq!(push_lid(&s, &prev, &now).lid_angle, LID_BLOCKED_ANGLE);
    }

    #[test]
    fn hash_changes_with_pose() {
        let s = scene(vec![block("a", 0.5, 0.0)]);
        let mut t = s.clone();
        t.objects[0].pose.position.x += 1e-12;
        assert_ne!(s.hash(), t.hash());
        assert_eq!(s.hash(), s.clone().hash());
    }
}
