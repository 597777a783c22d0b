//! Numeric inverse kinematics for authoring scripted motions.
//!
//! Damped least squares on a finite-difference Jacobian of
//! [`forward_kinematics`]. Solutions are clamped to joint limits after each
//! update, so the result is always a legal configuration even when the
//! target is unreachable; check [`IkSolution::converged`].

use nalgebra::{Matrix6, SMatrix, UnitQuaternion, Vector3, Vector6};

use crate::arm::{forward_kinematics, JointVector, KinematicChain, DOF};
use crate::geometry::Pose3;

const FD_STEP: f64 = 1e-7;
const DAMPING: f64 = 1e-3;
/// Largest joint change per iteration, radians.
const MAX_STEP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkOptions {
    pub max_iterations: usize,
    pub position_tolerance: f64,
    pub orientation_tolerance: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            position_tolerance: 1e-6,
            orientation_tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkSolution {
    pub q: JointVector,
    pub position_error: f64,
    pub orientation_error: f64,
    pub converged: bool,
}

/// End-effector orientation with the tool axis pointing straight down and
/// the tool x axis at heading `yaw`.
pub fn downward(yaw: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
}

fn fk(chain: &KinematicChain, q: &JointVector) -> Pose3 {
    forward_kinematics(chain, q).expect("solver keeps q within limits")
}

fn pose_error(target: &Pose3, current: &Pose3) -> Vector6<f64> {
    let dp = target.position - current.position;
    let dr = (target.orientation * current.orientation.inverse()).scaled_axis();
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

fn clamp(chain: &KinematicChain, q: &mut JointVector) {
    for (v, l) in q.0.iter_mut().zip(chain.limits()) {
        *v = v.clamp(l.min, l.max);
    }
}

/// Solves for a configuration reaching `target`, starting from `seed`.
pub fn solve(chain: &KinematicChain, target: &Pose3, seed: &JointVector, opts: IkOptions) -> IkSolution {
    let mut q = *seed;
    clamp(chain, &mut q);
    let mut current = fk(chain, &q);
    let mut e = pose_error(target, &current);
    for _ in 0..opts.max_iterations {
        if e.fixed_rows::<3>(0).norm() <= opts.position_tolerance
            && e.fixed_rows::<3>(3).norm() <= opts.orientation_tolerance
        {
            break;
        }
        let mut jac = SMatrix::<f64, 6, DOF>::zeros();
        for j in 0..DOF {
            let mut qp = q;
            qp.0[j] += FD_STEP;
            let d = pose_error(&chain.fk_unchecked(&qp.0), &current);
            jac.set_column(j, &(d / FD_STEP));
        }
        let jjt: Matrix6<f64> = jac * jac.transpose() + Matrix6::identity() * (DAMPING * DAMPING);
        let Some(inv) = jjt.try_inverse() else { break };
        let mut dq = jac.transpose() * inv * e;
        let m = dq.amax();
        if m > MAX_STEP {
            dq *= MAX_STEP / m;
        }
        for j in 0..DOF {
            q.0[j] += dq[j];
        }
        clamp(chain, &mut q);
        current = fk(chain, &q);
        e = pose_error(target, &current);
    }
    let position_error = e.fixed_rows::<3>(0).norm();
    let orientation_error = e.fixed_rows::<3>(3).norm();
    IkSolution {
        q,
        position_error,
        orientation_error,
        converged: position_error <= opts.position_tolerance * 10.0
            && orientation_error <= opts.orientation_tolerance * 10.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::ArmConfig;

    #[test]
    fn reaches_table_points_pointing_down() {
        let cfg = ArmConfig::builtin();
        let mut seed = cfg.home;
        for (x, y, z, yaw) in [(0.5, 0.0, 0.1, 0.0), (0.35, 0.3, 0.02, 1.0), (0.6, -0.3, 0.05, -1.2)] {
            let target = Pose3 {
                position: Vector3::new(x, y, z),
                orientation: downward(yaw),
            };
            let sol = solve(&cfg.chain, &target, &seed, IkOptions::default());
            assert!(sol.converged, "{x} {y} {z}: {sol:?}");
            assert!(cfg.chain.within_limits(&sol.q));
            seed = sol.q;
        }
    }

    #[test]
    fn home_is_downward_at_zero_yaw() {
        let cfg = ArmConfig::builtin();
        let ee = fk(&cfg.chain, &cfg.home);
        assert!(ee.orientation.angle_to(&downward(0.0)) < 1e-6);
    }
}
