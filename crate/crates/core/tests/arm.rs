use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teleop_core::arm::{clamp_command, forward_kinematics, step, ArmConfig, JointVector, DOF};
use teleop_core::progression::PlayerId;
use teleop_core::session::{OperatorInput, Phase, SessionConfig, SessionId, SessionState, DEFAULT_DT};
use teleop_core::task::TaskCatalog;

type M4 = [[f64; 4]; 4];

fn mul(a: &M4, b: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Classic DH link matrix: Rot_z(theta) Trans_z(d) Trans_x(a) Rot_x(alpha).
fn dh(theta: f64, d: f64, a: f64, alpha: f64) -> M4 {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    [
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn oracle(cfg: &ArmConfig, q: &[f64; DOF]) -> [f64; 3] {
    let mut t: M4 = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    for (row, qi) in cfg.chain.links().iter().zip(q) {
        t = mul(&t, &dh(qi + row.theta_offset, row.d, row.a, row.alpha));
    }
    [t[0][3], t[1][3], t[2][3]]
}

fn random_q(cfg: &ArmConfig, rng: &mut impl Rng) -> JointVector {
    let mut q = [0.0; DOF];
    for (v, l) in q.iter_mut().zip(cfg.chain.limits()) {
        *v = rng.random_range(l.min..=l.max);
    }
    JointVector(q)
}

#[test]
fn fk_matches_matrix_oracle() {
    let cfg = ArmConfig::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for _ in 0..10_000 {
        let q = random_q(&cfg, &mut rng);
        let p = forward_kinematics(&cfg.chain, &q).unwrap().position;
        let o = oracle(&cfg, &q.0);
        for k in 0..3 {
            worst = worst.max((p[k] - o[k]).abs());
        }
    }
    assert!(worst < 1e-9, "max error {worst}");
}

#[test]
fn home_pose_reference() {
    // Frozen from the matrix oracle at the home configuration.
    let cfg = ArmConfig::builtin();
    let p = forward_kinematics(&cfg.chain, &cfg.home).unwrap().position;
    let o = oracle(&cfg, &cfg.home.0);
    for k in 0..3 {
        assert!((p[k] - o[k]).abs() < 1e-12);
    }
    assert!(p.z > 0.0 && p.x > 0.2);
}

/// Hostile joint target: huge, non-finite, pinned to limits, or random.
fn hostile(cfg: &ArmConfig, rng: &mut impl Rng, current: &JointVector) -> JointVector {
    let mut q = [0.0; DOF];
    for (i, (v, l)) in q.iter_mut().zip(cfg.chain.limits()).enumerate() {
        *v = match rng.random_range(0..8) {
            0 => f64::NAN,
            1 => f64::INFINITY,
            2 => f64::NEG_INFINITY,
            3 => rng.random_range(-1e6..1e6),
            4 => l.min - rng.random::<f64>(),
            5 => l.max + rng.random::<f64>(),
            6 => current.0[i] + rng.random_range(-0.05..0.05),
            _ => rng.random_range(l.min..=l.max),
        };
    }
    JointVector(q)
}

/// Drives one session per task through `steps` hostile ticks and checks the
/// post-clamp safety envelope on every tick.
fn hostile_run(seed: u64, steps: usize) {
    let cfg = Arc::new(ArmConfig::builtin());
    let catalog = TaskCatalog::builtin();
    let max_delta = cfg.safety.max_joint_delta_per_tick;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for spec in catalog.iter() {
        let spec = Arc::new(spec.clone());
        let fresh = |seed: u64| {
            let mut s = SessionState::new(
                SessionId([3; 16]),
                PlayerId::new("p"),
                spec.clone(),
                cfg.clone(),
                seed,
                SessionConfig { countdown_s: 0.0 },
            )
            .unwrap();
            s.start().unwrap();
            s
        };
        let mut s = fresh(seed);
        for n in 0..steps {
            if s.phase != Phase::Playing {
                s = fresh(seed + n as u64);
            }
            let before = *s.arm.q();
            let input = OperatorInput {
                seq: n as u64 + 1,
                target_q: hostile(&cfg, &mut rng, &before),
                gripper_closed: rng.random(),
                client_timestamp: 0,
            };
            s.tick(&[input], DEFAULT_DT);
            let q = s.arm.q();
            assert!(cfg.chain.within_limits(q), "limits at step {n}: {q:?}");
            assert!(
                cfg.safety.is_safe_position(&s.arm.ee_pose().position),
                "workspace at step {n}"
            );
            for j in 0..DOF {
                assert!((q.0[j] - before.0[j]).abs() <= max_delta + 1e-12, "delta at step {n}");
            }
        }
    }
}

#[test]
fn hostile_stream_stays_safe() {
    hostile_run(17, 10_000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn clamp_then_step_is_safe(seed: u64, raw in prop::array::uniform7(-10.0f64..10.0)) {
        let cfg = ArmConfig::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = cfg.home_state();
        for _ in 0..50 {
            let target = if rng.random() { JointVector(raw) } else { hostile(&cfg, &mut rng, state.q()) };
            let cmd = clamp_command(&state, &target, &cfg.safety, &cfg.chain);
            prop_assert!(cfg.chain.within_limits(&cmd));
            let next = step(&cfg.chain, &state, &cmd, false, DEFAULT_DT);
            prop_assert!(cfg.safety.is_safe_position(&next.ee_pose().position));
            for j in 0..DOF {
                prop_assert!((next.q().0[j] - state.q().0[j]).abs() <= cfg.safety.max_joint_delta_per_tick + 1e-12);
            }
            state = next;
        }
    }
}
