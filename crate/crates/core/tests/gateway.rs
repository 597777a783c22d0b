use std::path::{Path, PathBuf};
use std::sync::Arc;

use proptest::prelude::*;

use teleop_core::arm::{ArmConfig, JointVector};
use teleop_core::cloud::{dequantize_axis, quantize_axis, PointCloudChunk, CELLS};
use teleop_core::gateway::fanout::{capture_cloud, capture_overlay, capture_state, Waker};
use teleop_core::gateway::harness::{self, HarnessConfig};
use teleop_core::gateway::route::handle_inbound;
use teleop_core::gateway::wire::{
    Auth, ErrorCode, ErrorPayload, Hello, Input, Join, Leaderboard, SessionEnd, TaskInfo, MESSAGE_TYPES,
};
use teleop_core::gateway::{
    decode, encode, AttachError, Body, CameraHint, Fanout, FanoutConfig, Frame, LatencyModel, Role, WireError,
    WireMessage,
};
use teleop_core::geometry::{Aabb, Pose3};
use teleop_core::progression::{Badge, BadgeRule, LeaderboardEntry, PlayerId, PlayerProfile};
use teleop_core::script::Script;
use teleop_core::session::{
    AttemptSummary, OperatorInput, Phase, SessionConfig, SessionId, SessionState, SessionSummary, DEFAULT_DT,
};
use teleop_core::task::{AttemptOutcome, GameEvent, GameEventKind, StageResult, TaskCatalog, TaskId, TaskRole};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn session(task: &str, seed: u64) -> SessionState {
    let spec = TaskCatalog::builtin().get(&TaskId::from(task)).unwrap().clone();
    let mut s = SessionState::new(
        SessionId([0xab; 16]),
        PlayerId::new("p1"),
        Arc::new(spec),
        Arc::new(ArmConfig::builtin()),
        seed,
        SessionConfig { countdown_s: 0.0 },
    )
    .unwrap();
    s.start().unwrap();
    s
}

fn profile() -> PlayerProfile {
    PlayerProfile {
        player_id: PlayerId::new("0f1e2d3c"),
        username: "ada".into(),
        avatar_id: 3,
        total_points: 1250,
        episodes_played: 4,
        games_played: 2,
        badges: ["first_episode".to_string()].into(),
        created_at: 1_700_000_000_000,
        tasks_completed: [TaskId::from("AnimalDorms")].into(),
    }
}

/// One representative message per type, in tag order.
fn samples() -> Vec<WireMessage> {
    let s = session("GroceryCheckout", 11);
    let state = capture_state(&s, 42, true, 2);
    let summary = SessionSummary {
        summary_id: "ab".repeat(16),
        player: PlayerId::new("0f1e2d3c"),
        task: TaskId::from("GroceryCheckout"),
        attempts: vec![AttemptSummary {
            attempt_index: 1,
            seed: u64::MAX,
            outcome: AttemptOutcome::Success,
            stage_results: vec![StageResult {
                stage: "pick".into(),
                achieved: true,
                t_achieved: Some(2.5),
            }],
            points: 1400,
            duration: 31.25,
            episode_id: format!("{}-01", "ab".repeat(16)),
            final_scene_hash: "00ff".into(),
        }],
        total_points: 1400,
        best_attempt: Some(1),
    };
    let bodies = vec![
        Body::Hello(Hello {
            versions: vec![1],
            agent: "teleop-server/0.1.0".into(),
            tasks: vec![TaskInfo {
                id: TaskId::from("ScanBottle"),
                role: TaskRole::Target,
                narrative: "Show the barcode to the scanner.".into(),
                time_limit: 120.0,
                stages: vec!["reach".into(), "pick".into(), "scan".into()],
                max_attempts: 3,
            }],
        }),
        Body::Auth(Auth::Granted {
            player_id: PlayerId::new("0f1e2d3c"),
            token: "0f1e2d3c.deadbeef".into(),
            profile: profile(),
        }),
        Body::JoinOperator(Join::Request {
            session: None,
            task: Some(TaskId::from("PackBox")),
            seed: Some(18_446_744_073_709_551_557),
        }),
        Body::JoinSpectator(Join::Accepted {
            session: SessionId([0xab; 16]),
            task: TaskId::from("PackBox"),
            role: Role::Spectator,
            spectator_path: format!("/session/{}?role=spectator", "ab".repeat(16)),
        }),
        Body::Input(Input::Joint {
            target_q: JointVector([0.1, -0.25, 0.0, -2.4, 0.0, 2.15, 0.7853981633974483]),
            gripper_closed: true,
            client_timestamp: 1234,
        }),
        Body::StateUpdate(Box::new(state)),
        Body::OverlayUpdate(capture_overlay(&s)),
        Body::Event(GameEvent::new(
            12.5,
            GameEventKind::ReceiptCheck {
                object: "item".into(),
                index: 0,
            },
        )),
        Body::CloudChunk(capture_cloud(&s, 7, 12)),
        Body::SessionEnd(SessionEnd::Summary {
            summary,
            unlocked: vec![Badge {
                id: "first_episode".into(),
                name: "First episode".into(),
                rule: BadgeRule::EpisodesPlayed { n: 1 },
            }],
            profile: Some(profile()),
        }),
        Body::LeaderboardUpdate(Leaderboard::Snapshot {
            entries: vec![LeaderboardEntry {
                rank: 1,
                player_id: PlayerId::new("0f1e2d3c"),
                username: "ada".into(),
                total_points: 1250,
            }],
        }),
        Body::Error(ErrorPayload {
            code: ErrorCode::UnsupportedVersion,
            message: "unsupported protocol version 2".into(),
            supported: vec![1],
        }),
    ];
    bodies.into_iter().enumerate().map(|(i, b)| WireMessage::new(i as u64 + 1, b)).collect()
}

#[test]
fn every_type_has_a_sample() {
    let names: Vec<_> = samples().iter().map(|m| m.body.type_name()).collect();
    assert_eq!(names, MESSAGE_TYPES);
}

#[test]
fn round_trip_every_type() {
    for m in samples() {
        assert_eq!(decode(&encode(&m)).unwrap(), m, "{}", m.body.type_name());
    }
    let extra = [
        Body::Auth(Auth::Login {
            username: "ada".into(),
            avatar_id: 1,
        }),
        Body::Auth(Auth::Resume { token: "x.y".into() }),
        Body::Input(Input::Start),
        Body::Input(Input::NextAttempt { reuse_seed: true }),
        Body::SessionEnd(SessionEnd::Request),
        Body::LeaderboardUpdate(Leaderboard::Request { top: 10 }),
        Body::JoinSpectator(Join::Request {
            session: Some(SessionId([1; 16])),
            task: None,
            seed: None,
        }),
    ];
    for b in extra {
        let m = WireMessage::new(9, b);
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }
}

/// Compares against the frozen bytes; `UPDATE_GOLDEN=1` rewrites them.
#[test]
fn golden_frames() {
    let dir = repo().join("fixtures/protocol");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    if update {
        std::fs::create_dir_all(&dir).unwrap();
    }
    for (i, m) in samples().iter().enumerate() {
        let frame = encode(m);
        let (ext, bytes) = match &frame {
            Frame::Text(t) => ("json", t.as_bytes().to_vec()),
            Frame::Binary(b) => ("bin", b.clone()),
        };
        let path = dir.join(format!("{i:02}_{}.{ext}", m.body.type_name()));
        if update {
            std::fs::write(&path, &bytes).unwrap();
        }
        let golden = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(bytes, golden, "{} drifted from its golden frame", path.display());
        let frozen = match ext {
            "json" => Frame::Text(String::from_utf8(golden).unwrap()),
            _ => Frame::Binary(golden),
        };
        assert_eq!(&decode(&frozen).unwrap(), m);
    }
}

#[test]
fn binary_header_layout() {
    let m = samples().into_iter().find(|m| matches!(m.body, Body::CloudChunk(_))).unwrap();
    let Frame::Binary(b) = encode(&m) else { panic!() };
    let Body::CloudChunk(c) = &m.body else { panic!() };
    assert_eq!(&b[0..2], &1u16.to_le_bytes());
    assert_eq!(b[2], 8);
    assert_eq!(b[3], 0);
    assert_eq!(&b[4..12], &m.seq.to_le_bytes());
    assert_eq!(&b[12..16], &c.frame_id.to_le_bytes());
    assert_eq!(&b[16..20], &(c.points.len() as u32).to_le_bytes());
    assert_eq!(b.len(), 68 + 9 * c.points.len());
}

#[test]
fn truncated_binary_reports_offset() {
    let m = samples().into_iter().find(|m| matches!(m.body, Body::CloudChunk(_))).unwrap();
    let Frame::Binary(b) = encode(&m) else { panic!() };
    for cut in [0, 5, 30, b.len() - 1] {
        match decode(&Frame::Binary(b[..cut].to_vec())) {
            Err(WireError::Malformed { offset, .. }) => assert_eq!(offset, cut),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut long = b.clone();
    long.push(0);
    assert!(matches!(decode(&Frame::Binary(long)), Err(WireError::Malformed { offset, .. }) if offset == b.len()));
    let mut v2 = b;
    v2[0] = 2;
    assert!(matches!(decode(&Frame::Binary(v2)), Err(WireError::UnsupportedVersion { found: 2, .. })));
}

proptest! {
    #[test]
    fn quantization_error_bound(lo in -5.0f64..5.0, extent in 1e-3f64..10.0, frac in prop::collection::vec(0.0f64..=1.0, 1..50)) {
        let hi = lo + extent;
        let bound = extent / (2.0 * CELLS) + 1e-12 * extent.max(1.0);
        for f in frac {
            let v = lo + f * extent;
            let back = dequantize_axis(quantize_axis(v, lo, hi), lo, hi);
            prop_assert!((back - v).abs() <= bound, "{v} -> {back}");
        }
    }

    #[test]
    fn cloud_points_survive_the_wire(seed in 0u64..500) {
        let s = session("PackBox", seed);
        let c = capture_cloud(&s, 1, 64);
        let bounds = c.bounds;
        let m = WireMessage::new(1, Body::CloudChunk(c.clone()));
        let Body::CloudChunk(back) = decode(&encode(&m)).unwrap().body else { panic!() };
        prop_assert_eq!(&back, &c);
        for i in 0..back.points.len() {
            let p = back.position(i);
            for k in 0..3 {
                prop_assert!(p[k] >= bounds.min[k] && p[k] <= bounds.max[k]);
            }
        }
    }

    #[test]
    fn beam_hits_table_plane(x in 0.2f64..0.8, y in -0.4f64..0.4, z in 0.01f64..0.8, yaw in -3.0f64..3.0, tilt in -1.2f64..1.2) {
        let rot = teleop_core::ik::downward(yaw)
            * nalgebra::UnitQuaternion::from_axis_angle(&nalgebra::Vector3::x_axis(), tilt);
        let h = CameraHint::from_ee(&Pose3::new(nalgebra::Vector3::new(x, y, z), rot));
        let hit = h.beam_hit.unwrap();
        prop_assert_eq!(hit[2], teleop_core::scene::TABLE_Z);
        let d = h.beam_direction;
        let s = (hit[0] - x) / d[0];
        prop_assert!(s.is_nan() || s.is_infinite() || ((y + s * d[1]) - hit[1]).abs() < 1e-9);
    }
}

fn noop() -> Waker {
    Arc::new(|| {})
}

#[test]
fn operator_slot_is_exclusive_and_spectators_capped() {
    let s = session("PackBox", 1);
    let mut f = Fanout::new(FanoutConfig {
        max_spectators: 2,
        ..FanoutConfig::default()
    });
    f.attach(1, Role::Operator, &s, noop()).unwrap();
    assert_eq!(f.attach(2, Role::Operator, &s, noop()).unwrap_err(), AttachError::OperatorSlotTaken);
    f.attach(3, Role::Spectator, &s, noop()).unwrap();
    f.attach(4, Role::Spectator, &s, noop()).unwrap();
    assert_eq!(f.attach(5, Role::Spectator, &s, noop()).unwrap_err(), AttachError::SpectatorLimit(2));
    f.detach(1);
    f.attach(2, Role::Operator, &s, noop()).unwrap();
}

#[test]
fn no_spectators_only_operator_queue() {
    let mut s = session("PackBox", 1);
    let mut f = Fanout::new(FanoutConfig::default());
    let op = f.attach(1, Role::Operator, &s, noop()).unwrap();
    op.lock().unwrap().drain();
    let (ev, _) = s.tick(&[], DEFAULT_DT);
    let cloud = f.cloud_due().then(|| capture_cloud(&s, 0, 16));
    let r = f.broadcast_tick(&s, &ev, cloud);
    assert_eq!(r.queue_sizes.keys().copied().collect::<Vec<_>>(), vec![1]);
}

#[test]
fn cadence_is_20hz_state_10hz_cloud() {
    let mut s = session("ScanBottle", 1);
    let mut f = Fanout::new(FanoutConfig::default());
    let op = f.attach(1, Role::Operator, &s, noop()).unwrap();
    op.lock().unwrap().drain();
    let (mut states, mut clouds) = (0, 0);
    for _ in 0..600 {
        let (ev, _) = s.tick(&[], DEFAULT_DT);
        let cloud = f.cloud_due().then(|| capture_cloud(&s, 0, 16));
        f.broadcast_tick(&s, &ev, cloud);
        for m in op.lock().unwrap().drain() {
            match m.body {
                Body::StateUpdate(_) => states += 1,
                Body::CloudChunk(_) => clouds += 1,
                _ => {}
            }
        }
    }
    assert_eq!((states, clouds), (200, 100));
}

#[test]
fn mid_attempt_join_starts_with_current_snapshot() {
    let sc = Script::load(&repo().join("fixtures/scripts/animal_dorms_success.script")).unwrap();
    let mut s = session("AnimalDorms", sc.seed);
    let mut f = Fanout::new(FanoutConfig::default());
    f.attach(1, Role::Operator, &s, noop()).unwrap();
    let mut player = teleop_core::script::ScriptPlayer::new(&sc);
    for _ in 0..400 {
        let pending: Vec<_> = player.due(s.clock).into_iter().collect();
        let (ev, _) = s.tick(&pending, DEFAULT_DT);
        f.broadcast_tick(&s, &ev, None);
    }
    let spec = f.attach(2, Role::Spectator, &s, noop()).unwrap();
    let first = spec.lock().unwrap().drain().remove(0);
    let Body::StateUpdate(snap) = first.body else { panic!("{first:?}") };
    assert!(snap.keyframe);
    let current = capture_state(&s, f.tick(), true, 1);
    assert_eq!(*snap, current);
    assert_eq!(snap.q, *s.arm.q());
    assert!(snap.objects.iter().any(|o| o.attached) || s.scene.grasp.is_none());
}

fn arbitrary_body() -> impl Strategy<Value = Body> {
    let q = prop::array::uniform7(-4.0f64..4.0).prop_map(JointVector);
    prop_oneof![
        (q, any::<bool>(), any::<u64>()).prop_map(|(target_q, gripper_closed, client_timestamp)| Body::Input(
            Input::Joint {
                target_q,
                gripper_closed,
                client_timestamp
            }
        )),
        Just(Body::Input(Input::Start)),
        any::<bool>().prop_map(|reuse_seed| Body::Input(Input::NextAttempt { reuse_seed })),
        Just(Body::SessionEnd(SessionEnd::Request)),
        (0u32..50).prop_map(|top| Body::LeaderboardUpdate(Leaderboard::Request { top })),
        Just(Body::Hello(Hello {
            versions: vec![1],
            agent: "x".into(),
            tasks: vec![]
        })),
        Just(Body::Auth(Auth::Login {
            username: "eve".into(),
            avatar_id: 0
        })),
        Just(Body::JoinOperator(Join::Request {
            session: None,
            task: Some(TaskId::from("PackBox")),
            seed: None
        })),
        Just(Body::Event(GameEvent::new(0.0, GameEventKind::Confetti))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn spectators_cannot_alter_the_session(bodies in prop::collection::vec(arbitrary_body(), 1..40)) {
        let mut s = session("PackBox", 5);
        for _ in 0..30 {
            s.tick(&[], DEFAULT_DT);
        }
        let hash = s.scene.hash();
        let (phase, clock, q, attempts) = (s.phase, s.clock, *s.arm.q(), s.attempts().len());
        let mut pending: Vec<OperatorInput> = Vec::new();
        for (i, b) in bodies.into_iter().enumerate() {
            let msg = WireMessage::new(i as u64 + 1, b);
            prop_assert!(handle_inbound(&mut s, Role::Spectator, &msg, &mut pending).is_err());
        }
        prop_assert!(pending.is_empty());
        s.tick(&pending, DEFAULT_DT);
        prop_assert_eq!(s.scene.hash(), hash);
        prop_assert_eq!(s.phase, phase);
        prop_assert_eq!(*s.arm.q(), q);
        prop_assert_eq!(s.attempts().len(), attempts);
        prop_assert!(s.clock > clock);
    }
}

#[test]
fn operator_commands_do_apply() {
    let mut s = session("PackBox", 5);
    let mut pending = Vec::new();
    let end = WireMessage::new(1, Body::SessionEnd(SessionEnd::Request));
    let applied = handle_inbound(&mut s, Role::Operator, &end, &mut pending).unwrap();
    assert_eq!(s.phase, Phase::Ended);
    assert_eq!(applied.summary.unwrap().attempts.len(), 1);
}

fn wander() -> (Arc<teleop_core::task::TaskSpec>, Script) {
    let sc = Script::load(&repo().join("fixtures/scripts/wander_30s.script")).unwrap();
    let spec = TaskCatalog::builtin().get(&sc.task).unwrap().clone();
    (Arc::new(spec), sc)
}

#[test]
fn spectators_consistent_under_latency_profiles() {
    let (spec, sc) = wander();
    let cfg = HarnessConfig {
        spectators: vec![
            LatencyModel::NONE,
            LatencyModel::lan(1),
            LatencyModel::wan(2),
            LatencyModel::wan(3),
        ],
        join_ticks: vec![0, 0, 0, 700],
        ..HarnessConfig::default()
    };
    let r = harness::run(spec, Arc::new(ArmConfig::builtin()), &sc, &cfg);
    for i in 0..cfg.spectators.len() {
        assert!(r.spectator_ok(i), "spectator {i}");
    }
    // The zero-latency spectator sees every issued state except the other
    // connections' join keyframes.
    assert_eq!(r.spectators[0].states.len(), r.issued_states.len() - 4);
    assert!(r.spectators[2].dropped > 0);
    assert!(r.spectators[3].events.len() < r.events.len());
    let first = &r.spectators[3].states[0];
    assert!(first.keyframe);
}

#[test]
fn operator_latency_keeps_stage_outcome() {
    let sc = Script::load(&repo().join("fixtures/scripts/animal_dorms_success.script")).unwrap();
    let spec = Arc::new(TaskCatalog::builtin().get(&sc.task).unwrap().clone());
    let arm = Arc::new(ArmConfig::builtin());
    let fast = harness::run(spec.clone(), arm.clone(), &sc, &HarnessConfig::default());
    let slow = harness::run(
        spec,
        arm,
        &sc,
        &HarnessConfig {
            operator: LatencyModel::wan(4),
            ..HarnessConfig::default()
        },
    );
    let stages = |r: &harness::HarnessReport| {
        r.summary.attempts[0]
            .stage_results
            .iter()
            .map(|s| s.achieved)
            .collect::<Vec<_>>()
    };
    assert_eq!(fast.summary.attempts[0].outcome, AttemptOutcome::Success);
    assert_eq!(stages(&fast), stages(&slow));
    assert_eq!(slow.summary.attempts[0].outcome, AttemptOutcome::Success);
}

#[test]
fn bounds_in_cloud_are_the_workspace() {
    let s = session("PackBox", 1);
    let c: PointCloudChunk = capture_cloud(&s, 0, 8);
    let ws: Aabb = ArmConfig::builtin().safety.workspace;
    assert_eq!(c.bounds, ws);
}
