//! Kinematic simulation of a 7-DoF arm.
//!
//! The arm is driven in joint space: every tick the operator's target is
//! passed through [`clamp_command`] and then tracked by [`step`], which moves
//! each joint toward the target at no more than its velocity limit. There are
//! no dynamics. Forward kinematics composes standard Denavit-Hartenberg
//! transforms (`Rz(θ) · Tz(d) · Tx(a) · Rx(α)` per link).

use std::path::Path;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{renormalize, Aabb, Pose3};

/// Number of actuated joints.
pub const DOF: usize = 7;

/// Version of the arm configuration file format understood by [`ArmConfig::from_toml`].
pub const ARM_CONFIG_VERSION: u32 = 1;

/// Seconds needed for the gripper to travel from fully open to fully closed.
pub const GRIPPER_STROKE_TIME: f64 = 0.5;

/// Joint angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointVector(pub [f64; DOF]);

impl JointVector {
    pub const ZERO: JointVector = JointVector([0.0; DOF]);

    pub fn as_array(&self) -> &[f64; DOF] {
        &self.0
    }

    fn lerp(&self, other: &JointVector, s: f64) -> JointVector {
        let mut out = [0.0; DOF];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.0[i] + s * (other.0[i] - self.0[i]);
        }
        JointVector(out)
    }
}

impl std::ops::Index<usize> for JointVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// One standard DH row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    #[serde(default)]
    pub theta_offset: f64,
}

impl DhRow {
    fn transform(&self, q: f64) -> Isometry3<f64> {
        let theta = q + self.theta_offset;
        let (st, ct) = theta.sin_cos();
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha);
        Isometry3::from_parts(
            Translation3::new(self.a * ct, self.a * st, self.d),
            rot,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimit {
    pub min: f64,
    pub max: f64,
    /// rad/s
    pub max_velocity: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("joint {joint} value {value} outside [{min}, {max}]")]
    LimitViolation {
        joint: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid kinematic chain: {0}")]
    InvalidChain(String),
    #[error("invalid safety config: {0}")]
    InvalidSafety(String),
    #[error("arm config: {0}")]
    Config(String),
}

/// Validated chain: exactly [`DOF`] links with finite, ordered limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChain", into = "RawChain")]
pub struct KinematicChain {
    links: Vec<DhRow>,
    limits: Vec<JointLimit>,
}

#[derive(Serialize, Deserialize)]
struct RawChain {
    links: Vec<DhRow>,
    limits: Vec<JointLimit>,
}

impl TryFrom<RawChain> for KinematicChain {
    type Error = KinematicsError;
    fn try_from(raw: RawChain) -> Result<Self, Self::Error> {
        KinematicChain::new(raw.links, raw.limits)
    }
}

impl From<KinematicChain> for RawChain {
    fn from(c: KinematicChain) -> Self {
        RawChain {
            links: c.links,
            limits: c.limits,
        }
    }
}

impl KinematicChain {
    pub fn new(links: Vec<DhRow>, limits: Vec<JointLimit>) -> Result<Self, KinematicsError> {
        if links.len() != DOF || limits.len() != DOF {
            return Err(KinematicsError::InvalidChain(format!(
                "expected {DOF} links and limits, got {} and {}",
                links.len(),
                limits.len()
            )));
        }
        for (i, l) in limits.iter().enumerate() {
            if !(l.min.is_finite() && l.max.is_finite() && l.min < l.max) {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {i}: limits must be finite with min < max"
                )));
            }
            if !(l.max_velocity.is_finite() && l.max_velocity > 0.0) {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {i}: max_velocity must be positive"
                )));
            }
        }
        for (i, r) in links.iter().enumerate() {
            if ![r.a, r.d, r.alpha, r.theta_offset].iter().all(|v| v.is_finite()) {
                return Err(KinematicsError::InvalidChain(format!("link {i}: non-finite DH value")));
            }
        }
        Ok(Self { links, limits })
    }

    /// A chain whose links are given but which is not restricted to 7 joints.
    /// Only used to check the planar examples in tests.
    #[cfg(test)]
    pub(crate) fn unchecked(links: Vec<DhRow>, limits: Vec<JointLimit>) -> Self {
        Self { links, limits }
    }

    pub fn links(&self) -> &[DhRow] {
        &self.links
    }

    pub fn limits(&self) -> &[JointLimit] {
        &self.limits
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        self.check_limits(q).is_ok()
    }

    fn check_limits(&self, q: &JointVector) -> Result<(), KinematicsError> {
        for (i, l) in self.limits.iter().enumerate() {
            let v = q.0[i];
            if !(v >= l.min && v <= l.max) {
                return Err(KinematicsError::LimitViolation {
                    joint: i,
                    value: v,
                    min: l.min,
                    max: l.max,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn fk_unchecked(&self, q: &[f64]) -> Pose3 {
        let mut t = Isometry3::identity();
        for (row, &qi) in self.links.iter().zip(q) {
            t *= row.transform(qi);
        }
        Pose3::new(t.translation.vector, renormalize(t.rotation))
    }

    /// Clamps each coordinate into its joint range; NaN becomes `fallback`.
    fn clamp_to_limits(&self, q: &JointVector, fallback: &JointVector) -> JointVector {
        let mut out = q.0;
        for (i, l) in self.limits.iter().enumerate() {
            let v = if out[i].is_nan() { fallback.0[i] } else { out[i] };
            out[i] = v.clamp(l.min, l.max);
        }
        JointVector(out)
    }
}

/// End-effector pose of `q`. Fails if any joint is outside its limits.
pub fn forward_kinematics(chain: &KinematicChain, q: &JointVector) -> Result<Pose3, KinematicsError> {
    chain.check_limits(q)?;
    Ok(chain.fk_unchecked(&q.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    /// 1 = fully open, 0 = fully closed.
    pub aperture: f64,
    pub commanded_closed: bool,
}

impl Default for GripperState {
    fn default() -> Self {
        Self {
            aperture: 1.0,
            commanded_closed: false,
        }
    }
}

impl GripperState {
    fn advance(&self, closed: bool, dt: f64) -> GripperState {
        let target = if closed { 0.0 } else { 1.0 };
        let rate = dt / GRIPPER_STROKE_TIME;
        let diff = target - self.aperture;
        let aperture = if diff.abs() <= rate {
            target
        } else {
            self.aperture + rate.copysign(diff)
        };
        GripperState {
            aperture,
            commanded_closed: closed,
        }
    }
}

/// Snapshot of the simulated arm. `ee_pose` always equals the forward
/// kinematics of `q`; construct through [`ArmState::new`] or [`step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    q: JointVector,
    dq: [f64; DOF],
    gripper: GripperState,
    ee_pose: Pose3,
    tick: u64,
}

impl ArmState {
    pub fn new(chain: &KinematicChain, q: JointVector) -> Result<Self, KinematicsError> {
        let ee_pose = forward_kinematics(chain, &q)?;
        Ok(Self {
            q,
            dq: [0.0; DOF],
            gripper: GripperState::default(),
            ee_pose,
            tick: 0,
        })
    }

    pub fn q(&self) -> &JointVector {
        &self.q
    }

    pub fn dq(&self) -> &[f64; DOF] {
        &self.dq
    }

    pub fn gripper(&self) -> &GripperState {
        &self.gripper
    }

    pub fn ee_pose(&self) -> &Pose3 {
        &self.ee_pose
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyConfig {
    pub workspace: Aabb,
    /// rad per tick, applied to every joint.
    pub max_joint_delta_per_tick: f64,
    pub table_height_z: f64,
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.max_joint_delta_per_tick.is_finite() && self.max_joint_delta_per_tick > 0.0) {
            return Err(KinematicsError::InvalidSafety(
                "max_joint_delta_per_tick must be positive".into(),
            ));
        }
        if !self.workspace.is_valid() {
            return Err(KinematicsError::InvalidSafety("workspace box is not ordered".into()));
        }
        if !self.table_height_z.is_finite() {
            return Err(KinematicsError::InvalidSafety("table_height_z must be finite".into()));
        }
        Ok(())
    }

    pub fn is_safe_position(&self, p: &Vector3<f64>) -> bool {
        self.workspace.contains(p) && p.z >= self.table_height_z
    }
}

/// Number of bisection steps used to pull an unsafe command back along the
/// joint-space segment from the current configuration.
pub const PROJECTION_ITERATIONS: u32 = 16;

/// Turns an arbitrary operator target into a command that is safe to track
/// this tick.
///
/// The result moves each joint by at most `max_joint_delta_per_tick`, stays
/// inside the joint limits, and keeps the end effector inside the workspace
/// box and above the table. When the rate-limited target is unsafe, the
/// segment from `state.q` toward it is bisected for the furthest safe point.
pub fn clamp_command(
    state: &ArmState,
    target_q: &JointVector,
    cfg: &SafetyConfig,
    chain: &KinematicChain,
) -> JointVector {
    let current = state.q;
    let max_delta = cfg.max_joint_delta_per_tick;
    let mut limited = [0.0; DOF];
    for i in 0..DOF {
        let t = target_q.0[i];
        let t = if t.is_nan() { current.0[i] } else { t };
        let delta = (t - current.0[i]).clamp(-max_delta, max_delta);
        limited[i] = current.0[i] + delta;
    }
    let candidate = chain.clamp_to_limits(&JointVector(limited), &current);
    if candidate == current {
        return current;
    }

    let safe = |q: &JointVector| cfg.is_safe_position(&chain.fk_unchecked(&q.0).position);
    if safe(&candidate) {
        return candidate;
    }
    if !safe(&current) {
        return current;
    }

    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..PROJECTION_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if safe(&current.lerp(&candidate, mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo == 0.0 {
        return current;
    }
    let projected = chain.clamp_to_limits(&current.lerp(&candidate, lo), &current);
    if safe(&projected) {
        projected
    } else {
        current
    }
}

/// Advances the arm one tick toward `commanded_q`.
///
/// Every joint moves by at most `max_velocity * dt`; a target within reach is
/// hit exactly. Deterministic in all inputs.
pub fn step(
    chain: &KinematicChain,
    state: &ArmState,
    commanded_q: &JointVector,
    gripper_closed: bool,
    dt: f64,
) -> ArmState {
    debug_assert!(dt > 0.0);
    let mut q = state.q.0;
    let mut dq = [0.0; DOF];
    for (i, lim) in chain.limits.iter().enumerate() {
        let reach = lim.max_velocity * dt;
        let diff = commanded_q.0[i] - state.q.0[i];
        let next = if diff.abs() <= reach {
            commanded_q.0[i]
        } else {
            state.q.0[i] + reach.copysign(diff)
        };
        q[i] = next.clamp(lim.min, lim.max);
        dq[i] = (q[i] - state.q.0[i]) / dt;
    }
    let q = JointVector(q);
    let ee_pose = if q == state.q {
        state.ee_pose
    } else {
        chain.fk_unchecked(&q.0)
    };
    ArmState {
        q,
        dq,
        gripper: state.gripper.advance(gripper_closed, dt),
        ee_pose,
        tick: state.tick + 1,
    }
}

/// Arm description loaded from the versioned configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmConfig {
    pub chain: KinematicChain,
    pub safety: SafetyConfig,
    pub home: JointVector,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArmFile {
    version: u32,
    #[serde(rename = "joint")]
    joints: Vec<JointRow>,
    safety: SafetyFile,
    home: HomeFile,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JointRow {
    a: f64,
    d: f64,
    alpha: f64,
    #[serde(default)]
    theta_offset: f64,
    min: f64,
    max: f64,
    max_velocity: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SafetyFile {
    workspace_min: [f64; 3],
    workspace_max: [f64; 3],
    max_joint_delta_per_tick: f64,
    table_height_z: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HomeFile {
    q: [f64; DOF],
}

impl ArmConfig {
    pub fn from_toml(text: &str) -> Result<Self, KinematicsError> {
        let file: ArmFile = toml::from_str(text).map_err(|e| KinematicsError::Config(e.to_string()))?;
        if file.version != ARM_CONFIG_VERSION {
            return Err(KinematicsError::Config(format!(
                "unsupported arm config version {} (expected {ARM_CONFIG_VERSION})",
                file.version
            )));
        }
        let links = file
            .joints
            .iter()
            .map(|j| DhRow {
                a: j.a,
                d: j.d,
                alpha: j.alpha,
                theta_offset: j.theta_offset,
            })
            .collect();
        let limits = file
            .joints
            .iter()
            .map(|j| JointLimit {
                min: j.min,
                max: j.max,
                max_velocity: j.max_velocity,
            })
            .collect();
        let chain = KinematicChain::new(links, limits)?;
        let safety = SafetyConfig {
            workspace: Aabb::new(file.safety.workspace_min, file.safety.workspace_max),
            max_joint_delta_per_tick: file.safety.max_joint_delta_per_tick,
            table_height_z: file.safety.table_height_z,
        };
        safety.validate()?;
        let home = JointVector(file.home.q);
        let ee = forward_kinematics(&chain, &home)?;
        if !safety.is_safe_position(&ee.position) {
            return Err(KinematicsError::Config("home pose is outside the workspace".into()));
        }
        Ok(Self { chain, safety, home })
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KinematicsError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The checked-in default arm.
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_ARM_TOML).expect("built-in arm config is valid")
    }

    pub fn home_state(&self) -> ArmState {
        ArmState::new(&self.chain, self.home).expect("home validated on load")
    }
}

/// Contents of `config/arm.toml`.
pub const DEFAULT_ARM_TOML: &str = include_str!("../../../config/arm.toml");
