//! Authoring of scripted operator runs.
//!
//! [`plan_success`] builds a script that completes a task for one seed by
//! chaining straight-line end-effector moves solved with numeric IK.
//! [`plan_partial`] stops after a prefix of the task, and [`plan_wander`]
//! sweeps the arm around without touching anything. Every script is
//! verified by playing it through a session before it is returned.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::Vector3;
use teleop_core::arm::{forward_kinematics, ArmConfig, JointVector};
use teleop_core::geometry::{wrap_angle, Pose3};
use teleop_core::ik::{downward, solve, IkOptions};
use teleop_core::scene::{randomize_scene, GoalTarget, ObjectClass, SceneState};
use teleop_core::script::{play_attempt, Expectation, Script, ScriptStep};
use teleop_core::session::{SessionConfig, SessionId, SessionState, DEFAULT_DT};
use teleop_core::task::{scan_geometry, AttemptOutcome, StageKind, TaskId, TaskSpec};
use teleop_core::progression::PlayerId;

/// Script sample period, seconds.
pub const STEP_PERIOD: f64 = 0.05;
const SPEED: f64 = 0.15;
const YAW_SPEED: f64 = 0.8;
const TRAVEL_Z: f64 = 0.20;
const RELEASE_Z: f64 = 0.09;
/// Lowest end-effector height used for grasping.
const MIN_GRASP_Z: f64 = 0.02;
const GRIP_DWELL: f64 = 0.6;
const SETTLE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct PlanError(pub String);

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for PlanError {}

fn fail<T>(msg: impl Into<String>) -> Result<T, PlanError> {
    Err(PlanError(msg.into()))
}

/// Accumulates timed joint targets along end-effector paths.
pub struct Planner<'a> {
    arm: &'a ArmConfig,
    q: JointVector,
    pos: Vector3<f64>,
    yaw: f64,
    gripper: bool,
    t: f64,
    steps: Vec<ScriptStep>,
}

impl<'a> Planner<'a> {
    pub fn new(arm: &'a ArmConfig) -> Self {
        let ee = forward_kinematics(&arm.chain, &arm.home).expect("home is valid");
        let mut p = Self {
            arm,
            q: arm.home,
            pos: ee.position,
            yaw: ee.yaw(),
            gripper: false,
            t: 0.0,
            steps: Vec::new(),
        };
        p.emit();
        p
    }

    fn emit(&mut self) {
        self.steps.push(ScriptStep {
            t: self.t,
            q: self.q,
            gripper_closed: self.gripper,
        });
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pos
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    fn solve_at(&self, pos: Vector3<f64>, yaw: f64) -> Result<JointVector, PlanError> {
        let target = Pose3 {
            position: pos,
            orientation: downward(yaw),
        };
        let sol = solve(&self.arm.chain, &target, &self.q, IkOptions::default());
        if !sol.converged {
            return fail(format!("no IK solution near {pos:?} yaw {yaw:.3}: {:.2e} m", sol.position_error));
        }
        let jump = sol.q.0.iter().zip(&self.q.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if jump > 0.08 {
            return fail(format!("IK branch jump of {jump:.3} rad near {pos:?}"));
        }
        if !self.arm.safety.is_safe_position(&pos) {
            return fail(format!("{pos:?} is outside the safe workspace"));
        }
        Ok(sol.q)
    }

    /// Straight-line move of the end effector with linear yaw interpolation.
    pub fn move_to(&mut self, pos: Vector3<f64>, yaw: f64) -> Result<(), PlanError> {
        let (p0, y0) = (self.pos, self.yaw);
        let dist = (pos - p0).norm();
        let dyaw = yaw - y0;
        let secs = (dist / SPEED).max(dyaw.abs() / YAW_SPEED);
        let n = (secs / STEP_PERIOD).ceil().max(1.0) as usize;
        for i in 1..=n {
            let s = i as f64 / n as f64;
            let p = p0 + (pos - p0) * s;
            let y = y0 + dyaw * s;
            self.q = self.solve_at(p, y)?;
            self.pos = p;
            self.yaw = y;
            self.t += STEP_PERIOD;
            self.emit();
        }
        Ok(())
    }

    pub fn path(&mut self, points: &[Vector3<f64>]) -> Result<(), PlanError> {
        for p in points {
            self.move_to(*p, self.yaw)?;
        }
        Ok(())
    }

    pub fn hold(&mut self, secs: f64) {
        let n = (secs / STEP_PERIOD).ceil() as usize;
        for _ in 0..n {
            self.t += STEP_PERIOD;
            self.emit();
        }
    }

    pub fn grip(&mut self, closed: bool) {
        self.hold(SETTLE);
        self.gripper = closed;
        self.t += STEP_PERIOD;
        self.emit();
        self.hold(GRIP_DWELL);
    }

    pub fn steps(self) -> Vec<ScriptStep> {
        self.steps
    }

    fn above(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new(x, y, TRAVEL_Z)
    }

    /// Picks the object at `center`; the end effector ends at travel height with `yaw`.
    pub fn pick(&mut self, center: Vector3<f64>, grasp_yaw: f64) -> Result<(), PlanError> {
        self.move_to(Vector3::new(self.pos.x, self.pos.y, TRAVEL_Z), self.yaw)?;
        self.move_to(self.above(center.x, center.y), grasp_yaw)?;
        self.move_to(Vector3::new(center.x, center.y, center.z.max(MIN_GRASP_Z)), grasp_yaw)?;
        self.grip(true);
        self.move_to(self.above(center.x, center.y), grasp_yaw)
    }

    /// Carries the held object over `(x, y)`, turning to `yaw`, and lets go.
    pub fn drop_at(&mut self, x: f64, y: f64, yaw: f64) -> Result<(), PlanError> {
        self.move_to(self.above(x, y), yaw)?;
        self.move_to(Vector3::new(x, y, RELEASE_Z), yaw)?;
        self.grip(false);
        self.move_to(self.above(x, y), yaw)
    }
}

/// End-effector yaw at grasp time so that turning by `delta` stays centered on zero.
fn balanced_grasp_yaw(delta: f64) -> f64 {
    -delta / 2.0
}

fn object<'s>(scene: &'s SceneState, id: &str) -> Result<&'s teleop_core::scene::SceneObject, PlanError> {
    scene.object(id).ok_or_else(|| PlanError(format!("scene has no object {id:?}")))
}

/// Picks `id` and presents its barcode to the scanner named by the stage.
fn scan(p: &mut Planner, spec: &TaskSpec, scene: &SceneState, id: &str) -> Result<(), PlanError> {
    let stage = spec
        .stages
        .iter()
        .find(|s| s.kind == StageKind::Scanned)
        .ok_or_else(|| PlanError("task has no scan stage".into()))?;
    let scanner = match &stage.scanner {
        Some(s) => object(scene, s)?,
        None => scene
            .objects
            .iter()
            .find(|o| o.class == ObjectClass::Scanner)
            .ok_or_else(|| PlanError("no scanner".into()))?,
    };
    let (zone, facing) = scan_geometry(scanner, stage);
    let obj = object(scene, id)?;
    let axis = obj.barcode_axis.ok_or_else(|| PlanError(format!("{id} has no barcode")))?;
    let axis_yaw = axis.y.atan2(axis.x);
    let want = facing.y.atan2(facing.x) - axis_yaw;
    let delta = wrap_angle(want - obj.pose.yaw());
    let grasp_yaw = balanced_grasp_yaw(delta);
    p.pick(obj.center(), grasp_yaw)?;
    // The carried object hangs at the grasp offset; aim the object center, not the flange.
    let offset_z = obj.center().z - obj.center().z.max(MIN_GRASP_Z);
    let c = zone.center();
    let target = Vector3::new(c[0], c[1], c[2] - offset_z);
    p.move_to(Vector3::new(target.x, target.y, TRAVEL_Z), grasp_yaw + delta)?;
    p.move_to(target, grasp_yaw + delta)?;
    p.hold(0.5);
    p.move_to(Vector3::new(target.x, target.y, TRAVEL_Z), grasp_yaw + delta)
}

fn close_lid(p: &mut Planner, scene: &SceneState) -> Result<(), PlanError> {
    let bx = scene.cardboard_box().ok_or_else(|| PlanError("no box".into()))?;
    let hinge = teleop_core::scene::LidHinge::of(bx);
    let x = bx.center().x;
    let r = 0.6 * hinge.length;
    let yaw = p.yaw();
    let point = |a: f64| Vector3::new(x, hinge.hinge_y - r * a.cos(), hinge.top_z + r * a.sin());
    p.move_to(Vector3::new(p.position().x, p.position().y, 0.36), yaw)?;
    let start = point(1.95);
    p.move_to(Vector3::new(x, start.y, 0.36), yaw)?;
    p.move_to(start, yaw)?;
    let mut a: f64 = 1.95;
    while a > 0.05 {
        a = (a - 0.05).max(0.05);
        p.move_to(point(a), yaw)?;
    }
    p.hold(0.5);
    Ok(())
}

/// How much of the task a plan should perform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extent {
    Full,
    /// Stop before the final placement or scan.
    Partial,
}

fn choreograph(p: &mut Planner, spec: &TaskSpec, scene: &SceneState, extent: Extent) -> Result<(), PlanError> {
    let partial = extent == Extent::Partial;
    match spec.id.as_str() {
        TaskId::ANIMAL_DORMS => {
            let animal = object(scene, "animal")?;
            let house = scene
                .objects
                .iter()
                .find(|o| o.class == ObjectClass::HouseBox && o.color_tag == animal.color_tag)
                .ok_or_else(|| PlanError("no matching house".into()))?;
            p.pick(animal.center(), 0.0)?;
            if !partial {
                p.drop_at(house.center().x, house.center().y, 0.0)?;
            }
        }
        TaskId::SCENE_TWINS => {
            for (n, id) in ["block_a", "block_b"].into_iter().enumerate() {
                let o = object(scene, id)?;
                let Some(GoalTarget::Pose { x, y, yaw }) =
                    scene.goal.entries.iter().find(|e| e.object == id).map(|e| &e.target)
                else {
                    return fail(format!("no pose goal for {id}"));
                };
                let delta = wrap_angle(yaw - o.pose.yaw());
                let g = balanced_grasp_yaw(delta);
                p.pick(o.center(), g)?;
                if partial && n == 1 {
                    break;
                }
                p.drop_at(*x, *y, g + delta)?;
            }
        }
        TaskId::ARRANGE_DESK => {
            let Some(GoalTarget::Line { start, end, spacing }) = scene.goal.entries.first().map(|e| &e.target) else {
                return fail("no line goal");
            };
            let dir = Vector3::new(end[0] - start[0], end[1] - start[1], 0.0).normalize();
            let mid = Vector3::new(start[0] + end[0], start[1] + end[1], 0.0) / 2.0;
            for (n, id) in ["usb_adapter", "mouse"].into_iter().enumerate() {
                let o = object(scene, id)?;
                p.pick(o.center(), 0.0)?;
                if partial && n == 1 {
                    break;
                }
                let at = mid + dir * (*spacing * (n as f64 - 0.5));
                p.drop_at(at.x, at.y, 0.0)?;
            }
        }
        TaskId::SCAN_BOTTLE => {
            if partial {
                let o = object(scene, "bottle")?;
                p.pick(o.center(), 0.0)?;
            } else {
                scan(p, spec, scene, "bottle")?;
            }
        }
        TaskId::GROCERY_CHECKOUT => {
            scan(p, spec, scene, "item")?;
            if !partial {
                let basket = object(scene, "basket")?;
                p.drop_at(basket.center().x, basket.center().y, p.yaw())?;
            }
        }
        TaskId::PACK_BOX => {
            let tape = object(scene, "tape")?;
            let bx = scene.cardboard_box().ok_or_else(|| PlanError("no box".into()))?;
            p.pick(tape.center(), 0.0)?;
            p.drop_at(bx.center().x, bx.center().y, 0.0)?;
            if !partial {
                close_lid(p, scene)?;
            }
        }
        other => return fail(format!("no choreography for task {other}")),
    }
    p.hold(1.0);
    Ok(())
}

/// Deterministic session id for authored runs.
pub fn fixture_session_id(task: &TaskId, seed: u64, tag: u8) -> SessionId {
    let mut b = [0u8; 16];
    for (i, byte) in task.as_str().bytes().enumerate() {
        b[i % 8] ^= byte.rotate_left(i as u32);
    }
    b[8..16].copy_from_slice(&seed.to_le_bytes());
    b[7] ^= tag;
    SessionId(b)
}

/// Plays a script in a fresh zero-countdown session.
pub fn simulate(spec: &TaskSpec, arm: &Arc<ArmConfig>, script: &Script, session_id: SessionId) -> Result<SessionState, PlanError> {
    let mut s = SessionState::new(
        session_id,
        PlayerId::new("fixture-bot"),
        Arc::new(spec.clone()),
        arm.clone(),
        script.seed,
        SessionConfig { countdown_s: 0.0 },
    )
    .map_err(|e| PlanError(e.to_string()))?;
    s.start().map_err(|e| PlanError(e.to_string()))?;
    play_attempt(&mut s, script, DEFAULT_DT);
    Ok(s)
}

fn checked(spec: &TaskSpec, arm: &Arc<ArmConfig>, mut script: Script, expect: Expectation) -> Result<Script, PlanError> {
    let s = simulate(spec, arm, &script, fixture_session_id(&spec.id, script.seed, 0))?;
    let a = s.attempts().last().ok_or_else(|| PlanError("attempt did not end".into()))?;
    let achieved = a.stage_results.iter().filter(|r| r.achieved).count();
    if a.outcome != expect.outcome || achieved != expect.stages {
        return fail(format!(
            "{} seed {}: expected {:?} with {} stages, got {:?} with {achieved}",
            spec.id, script.seed, expect.outcome, expect.stages, a.outcome
        ));
    }
    script.expect = Some(expect);
    Ok(script)
}

fn base_script(spec: &TaskSpec, seed: u64, steps: Vec<ScriptStep>) -> Script {
    Script {
        task: spec.id.clone(),
        seed,
        expect: None,
        disconnect_at: None,
        steps,
    }
}

/// A verified script that achieves every stage of `spec` for `seed`.
pub fn plan_success(spec: &TaskSpec, arm: &Arc<ArmConfig>, seed: u64) -> Result<Script, PlanError> {
    let scene = randomize_scene(&spec.randomization, seed).map_err(|e| PlanError(e.to_string()))?;
    let mut p = Planner::new(arm);
    choreograph(&mut p, spec, &scene, Extent::Full)?;
    let script = base_script(spec, seed, p.steps());
    let expect = Expectation {
        outcome: AttemptOutcome::Success,
        stages: spec.stages.len(),
    };
    checked(spec, arm, script, expect)
}

/// A verified script that performs part of the task and then idles until timeout,
/// or disconnects at `disconnect_at` if given.
pub fn plan_partial(
    spec: &TaskSpec,
    arm: &Arc<ArmConfig>,
    seed: u64,
    disconnect_at: Option<f64>,
) -> Result<Script, PlanError> {
    let scene = randomize_scene(&spec.randomization, seed).map_err(|e| PlanError(e.to_string()))?;
    let mut p = Planner::new(arm);
    choreograph(&mut p, spec, &scene, Extent::Partial)?;
    let mut script = base_script(spec, seed, p.steps());
    script.disconnect_at = disconnect_at;
    let probe = simulate(spec, arm, &script, fixture_session_id(&spec.id, seed, 0))?;
    let a = probe.attempts().last().ok_or_else(|| PlanError("attempt did not end".into()))?;
    let expect = Expectation {
        outcome: if disconnect_at.is_some() {
            AttemptOutcome::Incomplete
        } else {
            AttemptOutcome::Timeout
        },
        stages: a.stage_results.iter().filter(|r| r.achieved).count(),
    };
    if expect.stages == spec.stages.len() {
        return fail("partial plan completed the task");
    }
    checked(spec, arm, script, expect)
}

/// Sweeps the end effector through a loop above the table for `duration`
/// seconds, then disconnects.
pub fn plan_wander(spec: &TaskSpec, arm: &Arc<ArmConfig>, seed: u64, duration: f64) -> Result<Script, PlanError> {
    let mut p = Planner::new(arm);
    let center = Vector3::new(0.5, 0.0, 0.30);
    p.move_to(center + Vector3::new(0.1, 0.0, 0.0), 0.0)?;
    let mut k = 0;
    while p.time() < duration {
        let a = 2.0 * PI * (k % 24) as f64 / 24.0;
        let yaw = 0.5 * (a).sin();
        p.move_to(center + Vector3::new(0.1 * a.cos(), 0.15 * a.sin(), 0.05 * (2.0 * a).sin()), yaw)?;
        k += 1;
    }
    let mut script = base_script(spec, seed, p.steps());
    script.disconnect_at = Some(duration);
    let expect = Expectation {
        outcome: AttemptOutcome::Incomplete,
        stages: 0,
    };
    checked(spec, arm, script, expect)
}

/// Tries consecutive seeds from `first` until a plan succeeds.
pub fn first_plannable(
    first: u64,
    tries: u64,
    mut plan: impl FnMut(u64) -> Result<Script, PlanError>,
) -> Result<Script, PlanError> {
    let mut last = PlanError("no seeds tried".into());
    for seed in first..first + tries {
        match plan(seed) {
            Ok(s) => return Ok(s),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Plays `script` and writes the resulting episode under `root`.
pub fn record_episode(
    spec: &TaskSpec,
    arm: &Arc<ArmConfig>,
    script: &Script,
    tag: u8,
    root: &std::path::Path,
) -> Result<std::path::PathBuf, PlanError> {
    let mut s = SessionState::new(
        fixture_session_id(&spec.id, script.seed, tag),
        PlayerId::new("fixture-bot"),
        Arc::new(spec.clone()),
        arm.clone(),
        script.seed,
        SessionConfig { countdown_s: 0.0 },
    )
    .map_err(|e| PlanError(e.to_string()))?;
    s.start().map_err(|e| PlanError(e.to_string()))?;
    let run = play_attempt(&mut s, script, DEFAULT_DT);
    let mut rec = teleop_core::dataset::EpisodeRecorder::new(root, DEFAULT_DT);
    rec.push(run.transitions);
    rec.finish_attempt(&s).map_err(|e| PlanError(e.to_string()))
}

/// File stem used for a task's shipped scripts, e.g. `animal_dorms`.
pub fn snake_case(task: &TaskId) -> String {
    let mut out = String::new();
    for (i, c) in task.as_str().chars().enumerate() {
        if c.is_ascii_uppercase() && i > 0 {
            out.push('_');
        }
        out.push(c.to_ascii_lowercase());
    }
    out
}
