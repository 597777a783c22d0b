//! The acceptance suite as runnable checks.
//!
//! Every criterion returns a [`Verdict`] instead of panicking, so `teleop
//! accept` and the `acceptance` test target report all of them in one run.
//! Oracles here are written independently of the code under test.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use teleop_core::arm::{forward_kinematics, ArmConfig, JointVector, DOF};
use teleop_core::cloud::{dequantize_axis, quantize_axis};
use teleop_core::dataset::format::{encode_transitions, TRANSITIONS_FILE};
use teleop_core::dataset::{
    read_episode, replay, write_episode, Action, AppliedInput, CotrainSampler, DatasetIndex, Episode, EpisodeMeta,
    Observation, Source, SourceEpisode, SourceLabel, Transition, SOFTWARE_VERSION,
};
use teleop_core::gateway::fanout::capture_cloud;
use teleop_core::gateway::harness::{self, HarnessConfig};
use teleop_core::gateway::wire::MESSAGE_TYPES;
use teleop_core::gateway::{decode, encode, Body, Frame, LatencyModel, WireMessage};
use teleop_core::geometry::Pose3;
use teleop_core::progression::{BadgeCatalog, PersistentStore, PlayerId, PlayerProfile, ProgressionStore};
use teleop_core::script::{play_attempt, Script};
use teleop_core::session::{
    AttemptSummary, OperatorInput, Phase, SessionConfig, SessionId, SessionState, SessionSummary, DEFAULT_DT,
};
use teleop_core::task::{AttemptOutcome, StageResult, TaskId};
use teleop_server::{Loaded, ServerConfig};

use crate::load::{run_load, LoadOptions, TOLERANCE};

/// Criterion names in reporting order.
pub const CRITERIA: [&str; 11] = [
    "fk_oracle",
    "safety",
    "replay_determinism",
    "recording_cadence",
    "sampler_exactness",
    "episode_round_trip",
    "spectator_consistency",
    "load",
    "progression",
    "protocol_goldens",
    "end_to_end",
];

/// Stage counts the three support-task success scripts must reach.
pub const E2E_SCRIPTS: [(&str, &str, usize); 3] = [
    ("ArrangeDesk", "arrange_desk_success.script", 4),
    ("ScanBottle", "scan_bottle_success.script", 3),
    ("PackBox", "pack_box_success.script", 3),
];

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub criterion: &'static str,
    pub pass: bool,
    pub seconds: f64,
    pub detail: String,
}

impl Verdict {
    /// One line of JSON.
    pub fn line(&self) -> String {
        serde_json::to_string(self).expect("verdicts serialize")
    }

    /// A short human-readable line.
    pub fn summary(&self) -> String {
        format!(
            "{} {} ({:.1} s): {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.criterion,
            self.seconds,
            self.detail
        )
    }
}

/// Where the suite finds its inputs.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub config: PathBuf,
    pub fixtures: PathBuf,
    /// The `teleop` binary; required by `end_to_end`.
    pub teleop_bin: Option<PathBuf>,
}

impl Inputs {
    /// Shipped config and fixtures under a repository root.
    pub fn from_root(root: &Path) -> Self {
        Self {
            config: root.join("config/server.toml"),
            fixtures: root.join("fixtures"),
            teleop_bin: None,
        }
    }

    fn assets(&self) -> Result<Loaded, String> {
        ServerConfig::load(&self.config)
            .and_then(ServerConfig::load_assets)
            .map_err(|e| e.to_string())
    }

    fn script(&self, name: &str) -> Result<Script, String> {
        let path = self.fixtures.join("scripts").join(name);
        Script::load(&path).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// Runs one criterion by name.
pub fn run(name: &str, inputs: &Inputs) -> Option<Verdict> {
    let check: fn(&Inputs) -> Result<(bool, String), String> = match name {
        "fk_oracle" => fk_oracle,
        "safety" => safety,
        "replay_determinism" => replay_determinism,
        "recording_cadence" => recording_cadence,
        "sampler_exactness" => sampler_exactness,
        "episode_round_trip" => episode_round_trip,
        "spectator_consistency" => spectator_consistency,
        "load" => load,
        "progression" => progression,
        "protocol_goldens" => protocol_goldens,
        "end_to_end" => end_to_end,
        _ => return None,
    };
    let criterion = CRITERIA.iter().find(|c| **c == name)?;
    let started = Instant::now();
    let (pass, detail) = check(inputs).unwrap_or_else(|e| (false, format!("error: {e}")));
    Some(Verdict {
        criterion,
        pass,
        seconds: started.elapsed().as_secs_f64(),
        detail,
    })
}

type M4 = [[f64; 4]; 4];

fn mat_mul(a: &M4, b: &M4) -> M4 {
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

/// Rot_z(theta) Trans_z(d) Trans_x(a) Rot_x(alpha).
fn dh_matrix(theta: f64, d: f64, a: f64, alpha: f64) -> M4 {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    [
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn matrix_fk(arm: &ArmConfig, q: &[f64; DOF]) -> [f64; 3] {
    let mut t: M4 = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    for (row, qi) in arm.chain.links().iter().zip(q) {
        t = mat_mul(&t, &dh_matrix(qi + row.theta_offset, row.d, row.a, row.alpha));
    }
    [t[0][3], t[1][3], t[2][3]]
}

fn random_q(arm: &ArmConfig, rng: &mut impl Rng) -> JointVector {
    let mut q = [0.0; DOF];
    for (v, l) in q.iter_mut().zip(arm.chain.limits()) {
        *v = rng.random_range(l.min..=l.max);
    }
    JointVector(q)
}

fn fk_oracle(inputs: &Inputs) -> Result<(bool, String), String> {
    const SAMPLES: usize = 10_000;
    let arm = inputs.assets()?.arm;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for _ in 0..SAMPLES {
        let q = random_q(&arm, &mut rng);
        let p = forward_kinematics(&arm.chain, &q).map_err(|e| e.to_string())?.position;
        let o = matrix_fk(&arm, &q.0);
        for k in 0..3 {
            worst = worst.max((p[k] - o[k]).abs());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((
        worst < 1e-9 && secs < 10.0,
        format!("{SAMPLES} samples, max position error {worst:.3e} m, {secs:.2} s"),
    ))
}

/// A joint target chosen to break things: non-finite, huge, past the limits, or plausible.
fn hostile(arm: &ArmConfig, rng: &mut impl Rng, current: &JointVector) -> JointVector {
    let mut q = [0.0; DOF];
    for (i, (v, l)) in q.iter_mut().zip(arm.chain.limits()).enumerate() {
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

fn safety(inputs: &Inputs) -> Result<(bool, String), String> {
    const STEPS: usize = 100_000;
    let Loaded { arm, catalog, .. } = inputs.assets()?;
    let arm = Arc::new(arm);
    let max_delta = arm.safety.max_joint_delta_per_tick;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut limit, mut workspace, mut delta) = (0u64, 0u64, 0u64);
    let mut tasks = 0;
    for spec in catalog.iter() {
        tasks += 1;
        let spec = Arc::new(spec.clone());
        let fresh = |seed: u64| -> Result<SessionState, String> {
            let mut s = SessionState::new(
                SessionId([3; 16]),
                PlayerId::new("hostile"),
                spec.clone(),
                arm.clone(),
                seed,
                SessionConfig { countdown_s: 0.0 },
            )
            .map_err(|e| e.to_string())?;
            s.start().map_err(|e| e.to_string())?;
            Ok(s)
        };
        let mut s = fresh(0)?;
        for n in 0..STEPS {
            if s.phase != Phase::Playing {
                s = fresh(n as u64)?;
            }
            let before = *s.arm.q();
            let input = OperatorInput {
                seq: n as u64 + 1,
                target_q: hostile(&arm, &mut rng, &before),
                gripper_closed: rng.random(),
                client_timestamp: 0,
            };
            s.tick(&[input], DEFAULT_DT);
            let q = s.arm.q();
            limit += u64::from(!arm.chain.within_limits(q));
            workspace += u64::from(!arm.safety.is_safe_position(&s.arm.ee_pose().position));
            delta += u64::from((0..DOF).any(|j| (q.0[j] - before.0[j]).abs() > max_delta + 1e-12));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((
        limit == 0 && workspace == 0 && delta == 0 && secs < 60.0,
        format!(
            "{STEPS} hostile steps x {tasks} tasks: {limit} limit, {workspace} workspace, {delta} joint-delta violations, {secs:.1} s"
        ),
    ))
}

fn episode_dirs(root: &Path) -> Result<Vec<PathBuf>, String> {
    let read = |p: &Path| std::fs::read_dir(p).map_err(|e| format!("{}: {e}", p.display()));
    let mut out = Vec::new();
    for task in read(root)? {
        let task = task.map_err(|e| e.to_string())?.path();
        if task.is_dir() {
            for ep in read(&task)? {
                out.push(ep.map_err(|e| e.to_string())?.path());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn replay_determinism(inputs: &Inputs) -> Result<(bool, String), String> {
    let Loaded { arm, catalog, .. } = inputs.assets()?;
    let arm = Arc::new(arm);
    let dirs = episode_dirs(&inputs.fixtures.join("episodes"))?;
    let mut tasks = BTreeSet::new();
    let (mut successes, mut failures) = (0, 0);
    let mut diverged = Vec::new();
    for dir in &dirs {
        let ep = read_episode(dir).map_err(|e| e.to_string())?;
        tasks.insert(ep.meta.task.clone());
        if ep.meta.success {
            successes += 1;
        } else {
            failures += 1;
        }
        let r = replay(&ep, &catalog, arm.clone()).map_err(|e| e.to_string())?;
        let stages_equal = r.stage_results.len() == ep.meta.stage_results.len()
            && r.stage_results.iter().zip(&ep.meta.stage_results).all(|(a, b)| {
                a.stage == b.stage && a.achieved == b.achieved && a.t_achieved.map(f64::to_bits) == b.t_achieved.map(f64::to_bits)
            });
        if !(r.is_exact() && stages_equal && r.final_scene_hash == ep.meta.final_scene_hash) {
            diverged.push(ep.meta.episode_id.clone());
        }
    }
    Ok((
        dirs.len() == 20 && tasks.len() == 6 && successes > 0 && failures > 0 && diverged.is_empty(),
        format!(
            "{} episodes ({successes} successes, {failures} failures, {} tasks), diverged: {diverged:?}",
            dirs.len(),
            tasks.len()
        ),
    ))
}

fn fresh_session(assets: &Loaded, script: &Script) -> Result<SessionState, String> {
    let spec = assets.catalog.get(&script.task).map_err(|e| e.to_string())?.clone();
    let mut s = SessionState::new(
        SessionId([7; 16]),
        PlayerId::new("tester"),
        Arc::new(spec),
        Arc::new(assets.arm.clone()),
        script.seed,
        SessionConfig { countdown_s: 0.0 },
    )
    .map_err(|e| e.to_string())?;
    s.start().map_err(|e| e.to_string())?;
    Ok(s)
}

fn recording_cadence(inputs: &Inputs) -> Result<(bool, String), String> {
    let assets = inputs.assets()?;
    let script = inputs.script("wander_30s.script")?;
    let mut s = fresh_session(&assets, &script)?;
    let run = play_attempt(&mut s, &script, DEFAULT_DT);
    let expected = (30.0_f64 * 12.0).ceil() as usize;
    let (lo, hi) = (1.0 / 12.0 - 1.0 / 60.0, 1.0 / 12.0 + 1.0 / 60.0);
    let gaps: Vec<f64> = run.transitions.windows(2).map(|w| w[1].t - w[0].t).collect();
    let min = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let max = gaps.iter().copied().fold(0.0, f64::max);
    let duration = s.attempts().last().map_or(0.0, |a| a.duration);
    Ok((
        run.transitions.len() == expected && min >= lo - 1e-9 && max <= hi + 1e-9,
        format!(
            "{} transitions over a {duration:.3} s attempt (want {expected}), spacing {:.4}..{:.4} s",
            run.transitions.len(),
            min,
            max
        ),
    ))
}

/// Chi-square p-value of `counts` against a uniform distribution.
fn uniform_p(counts: &[f64]) -> f64 {
    let expected = counts.iter().sum::<f64>() / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("at least two cells");
    1.0 - dist.cdf(chi2)
}

fn sampler_exactness(inputs: &Inputs) -> Result<(bool, String), String> {
    const BATCHES: usize = 10_000;
    const BATCH: usize = 128;
    let catalog = inputs.assets()?.catalog;
    let index = DatasetIndex::scan(&inputs.fixtures.join("episodes"), &catalog).map_err(|e| e.to_string())?;
    let a: Vec<SourceEpisode> = index.with_label(SourceLabel::Target).map(Into::into).collect();
    let b: Vec<SourceEpisode> = index.with_label(SourceLabel::Support).map(Into::into).collect();
    // Flat cell index of every (episode, transition) pair per source.
    let offsets = |eps: &[SourceEpisode]| {
        let mut at = 0u64;
        let mut map = BTreeMap::new();
        for e in eps {
            map.insert(e.episode_id.clone(), at);
            at += e.transitions;
        }
        (map, at as usize)
    };
    let (off_a, cells_a) = offsets(&a);
    let (off_b, cells_b) = offsets(&b);
    let mut counts_a = vec![0f64; cells_a];
    let mut counts_b = vec![0f64; cells_b];
    let mut sampler = CotrainSampler::new(a, b, BATCH, 0.5, 42).map_err(|e| e.to_string())?;
    let mut inexact = 0;
    for _ in 0..BATCHES {
        let batch = sampler.sample_batch();
        let from_a = batch.iter().filter(|i| i.source == Source::A).count();
        if batch.len() != BATCH || from_a != BATCH / 2 {
            inexact += 1;
        }
        for item in batch {
            let (map, counts) = match item.source {
                Source::A => (&off_a, &mut counts_a),
                Source::B => (&off_b, &mut counts_b),
            };
            counts[(map[&item.episode_id] + item.transition_index) as usize] += 1.0;
        }
    }
    let (pa, pb) = (uniform_p(&counts_a), uniform_p(&counts_b));
    Ok((
        inexact == 0 && pa > 0.01 && pb > 0.01,
        format!(
            "{BATCHES} batches of {BATCH}: {inexact} not 64+64; uniformity p = {pa:.3} over {cells_a} target cells, {pb:.3} over {cells_b} support cells"
        ),
    ))
}

fn random_episode(rng: &mut ChaCha8Rng, i: usize) -> Episode {
    let objects = rng.random_range(0..5);
    let n = rng.random_range(1..40);
    let mut f = || rng.random::<f64>() * 4.0 - 2.0;
    let q = |f: &mut dyn FnMut() -> f64| JointVector([f(), f(), f(), f(), f(), f(), f()]);
    let pose = |f: &mut dyn FnMut() -> f64| Pose3::from_xyz_yaw(f(), f(), f(), f());
    let transitions = (0..n)
        .map(|k| Transition {
            t: k as f64 / 12.0,
            observation: Observation {
                q: q(&mut f),
                gripper_aperture: f(),
                ee_pose: pose(&mut f),
                object_poses: (0..objects).map(|_| pose(&mut f)).collect(),
            },
            action: Action {
                target_q: q(&mut f),
                gripper_closed: f() > 0.0,
            },
        })
        .collect();
    let inputs = (0..n / 3)
        .map(|k| AppliedInput {
            tick: k as u64 * 7,
            target_q: q(&mut f),
            gripper_closed: f() > 0.0,
        })
        .collect();
    Episode {
        meta: EpisodeMeta {
            episode_id: format!("{i:032x}-01"),
            task: TaskId::from(["PackBox", "ScanBottle", "AnimalDorms"][i % 3]),
            player: "p".into(),
            attempt_index: 1,
            seed: u64::MAX - i as u64,
            success: i % 2 == 0,
            incomplete: i % 5 == 0,
            outcome: AttemptOutcome::Timeout,
            points: i as u64,
            dt: DEFAULT_DT,
            ticks: n as u64 * 5,
            software_version: SOFTWARE_VERSION.into(),
            final_scene_hash: format!("{i:016x}"),
            object_ids: (0..objects).map(|k| format!("o{k}")).collect(),
            stage_results: vec![StageResult {
                stage: "s".into(),
                achieved: true,
                t_achieved: Some(f()),
            }],
            attachments: vec![],
        },
        transitions,
        inputs,
    }
}

fn episode_round_trip(_: &Inputs) -> Result<(bool, String), String> {
    const EPISODES: usize = 100;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut unequal, mut bytes_differ, mut transitions) = (0, 0, 0);
    for i in 0..EPISODES {
        let ep = random_episode(&mut rng, i);
        transitions += ep.transitions.len();
        let path = write_episode(dir.path(), &ep).map_err(|e| e.to_string())?;
        let back = read_episode(&path).map_err(|e| e.to_string())?;
        unequal += usize::from(back != ep);
        let on_disk = std::fs::read(path.join(TRANSITIONS_FILE)).map_err(|e| e.to_string())?;
        let fresh = encode_transitions(&ep.transitions, ep.meta.object_ids.len()).map_err(|e| e.to_string())?;
        let reencoded = encode_transitions(&back.transitions, ep.meta.object_ids.len()).map_err(|e| e.to_string())?;
        bytes_differ += usize::from(on_disk != fresh || reencoded != fresh);
    }
    Ok((
        unequal == 0 && bytes_differ == 0,
        format!("{EPISODES} episodes, {transitions} transitions: {unequal} unequal after read, {bytes_differ} with differing bytes"),
    ))
}

fn spectator_consistency(inputs: &Inputs) -> Result<(bool, String), String> {
    let assets = inputs.assets()?;
    let script = inputs.script("wander_30s.script")?;
    let spec = Arc::new(assets.catalog.get(&script.task).map_err(|e| e.to_string())?.clone());
    let profiles = [
        ("50ms", LatencyModel::new(50.0, 0.0, 0.0, 1)),
        ("200+-50ms", LatencyModel::new(200.0, 50.0, 0.0, 2)),
        ("1%drop", LatencyModel::new(0.0, 0.0, 0.01, 3)),
        ("200+-50ms+1%drop", LatencyModel::new(200.0, 50.0, 0.01, 4)),
    ];
    let mut results = Vec::new();
    let mut pass = true;
    for (late, join) in [(false, 0u64), (true, 700)] {
        let config = HarnessConfig {
            operator: LatencyModel::NONE,
            spectators: profiles.iter().map(|p| p.1).collect(),
            join_ticks: vec![join; profiles.len()],
            ..HarnessConfig::default()
        };
        let r = harness::run(spec.clone(), Arc::new(assets.arm.clone()), &script, &config);
        for (i, (name, _)) in profiles.iter().enumerate() {
            let t = &r.spectators[i];
            let ok = r.spectator_ok(i);
            pass &= ok;
            results.push(format!(
                "{name}{}: {} ({} states, {} dropped)",
                if late { " late" } else { "" },
                if ok { "ok" } else { "inconsistent" },
                t.states.len(),
                t.dropped
            ));
        }
    }
    Ok((pass, results.join("; ")))
}

fn load(inputs: &Inputs) -> Result<(bool, String), String> {
    let data = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = LoadOptions {
        config: inputs.config.clone(),
        script: inputs.script("wander_60s.script")?,
        spectators: 8,
        latency_ms: 50.0,
        data_dir: data.path().to_path_buf(),
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    let report = rt.block_on(run_load(&opts))?;
    let fmt = |r: &Option<crate::load::Rate>| match r {
        Some(r) => format!("{:.2} Hz jitter {:.2}%", r.mean_hz, r.jitter * 100.0),
        None => "none".into(),
    };
    let spectator_hz: Vec<String> = report
        .spectator_states
        .iter()
        .map(|r| r.map_or("-".into(), |r| format!("{:.2}", r.mean_hz)))
        .collect();
    Ok((
        report.pass(TOLERANCE) && report.window_s >= 59.0,
        format!(
            "1+{} over {:.1} s at {} ms: states {}, records {}, ticks {}; spectator Hz [{}], {} summaries",
            report.spectators,
            report.window_s,
            report.latency_ms,
            fmt(&report.states),
            fmt(&report.records),
            fmt(&report.ticks),
            spectator_hz.join(" "),
            report.spectators_complete
        ),
    ))
}

const PLAYERS: usize = 5;

fn random_summary(rng: &mut ChaCha8Rng, id: usize, tasks: &[TaskId]) -> SessionSummary {
    let attempts = rng.random_range(0..4usize);
    let success = rng.random::<bool>();
    let task = tasks[rng.random_range(0..tasks.len())].clone();
    SessionSummary {
        summary_id: format!("summary-{id}"),
        player: PlayerId::new(format!("player-{}", rng.random_range(0..PLAYERS))),
        task,
        attempts: (0..attempts)
            .map(|k| AttemptSummary {
                attempt_index: k as u32 + 1,
                seed: 0,
                outcome: if success && k + 1 == attempts {
                    AttemptOutcome::Success
                } else {
                    AttemptOutcome::Timeout
                },
                stage_results: vec![],
                points: 0,
                duration: 1.0,
                episode_id: format!("summary-{id}-{k:02}"),
                final_scene_hash: String::new(),
            })
            .collect(),
        total_points: rng.random_range(0..700),
        best_attempt: None,
    }
}

/// Leaderboard order recomputed from the profiles.
fn expected_order(profiles: &[PlayerProfile]) -> Vec<PlayerId> {
    let mut v: Vec<&PlayerProfile> = profiles.iter().collect();
    v.sort_by_key(|p| (std::cmp::Reverse(p.total_points), p.created_at, p.username.clone()));
    v.into_iter().map(|p| p.player_id.clone()).collect()
}

fn counters(p: &PlayerProfile) -> (u64, u64, u64) {
    (p.total_points, p.episodes_played, p.games_played)
}

fn progression(inputs: &Inputs) -> Result<(bool, String), String> {
    const SEQUENCES: usize = 1_000;
    let assets = inputs.assets()?;
    let tasks: Vec<TaskId> = assets.catalog.ids().cloned().collect();
    let badges: BadgeCatalog = assets.badges;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut dup_effects, mut repeat_unlocks, mut missed_unlocks, mut misordered, mut persisted_mismatch) = (0, 0, 0, 0, 0);
    let (mut applied, mut duplicates) = (0usize, 0usize);
    let mut all_unlocks = 0usize;
    for seq in 0..SEQUENCES {
        let mut store = ProgressionStore::new(badges.clone());
        for p in 0..PLAYERS {
            // Shared creation times exercise the username tie-break.
            store
                .register(
                    PlayerId::new(format!("player-{p}")),
                    &format!("name_{}", PLAYERS - p),
                    0,
                    (p / 2) as u64,
                )
                .map_err(|e| e.to_string())?;
        }
        let mut delivered: Vec<SessionSummary> = Vec::new();
        let mut unlocks: BTreeMap<(PlayerId, String), usize> = BTreeMap::new();
        let steps = rng.random_range(1..60);
        for i in 0..steps {
            let redeliver = !delivered.is_empty() && rng.random_bool(0.2);
            let sum = if redeliver {
                delivered[rng.random_range(0..delivered.len())].clone()
            } else {
                random_summary(&mut rng, i, &tasks)
            };
            let before = store.profile(&sum.player).cloned().ok_or("unregistered player")?;
            let unlocked = store.apply_summary(&sum).map_err(|e| e.to_string())?;
            let after = store.profile(&sum.player).cloned().ok_or("unregistered player")?;
            if redeliver {
                duplicates += 1;
                dup_effects += usize::from(!unlocked.is_empty() || before != after);
            } else {
                applied += 1;
                delivered.push(sum.clone());
                let (b, a) = (counters(&before), counters(&after));
                dup_effects += usize::from(a != (b.0 + sum.total_points, b.1 + sum.attempts.len() as u64, b.2 + 1));
                for badge in &unlocked {
                    all_unlocks += 1;
                    *unlocks.entry((sum.player.clone(), badge.id.clone())).or_default() += 1;
                }
            }
            for p in store.profiles() {
                for badge in &store.catalog().badges {
                    missed_unlocks += usize::from(badge.rule.satisfied(p) != p.badges.contains(&badge.id));
                }
            }
            let profiles: Vec<PlayerProfile> = store.profiles().cloned().collect();
            let board = store.leaderboard(usize::MAX);
            let ids: Vec<PlayerId> = board.iter().map(|e| e.player_id.clone()).collect();
            let ranks_ok = board.iter().enumerate().all(|(k, e)| e.rank == k as u32 + 1);
            misordered += usize::from(ids != expected_order(&profiles) || !ranks_ok);
        }
        repeat_unlocks += unlocks.values().filter(|&&n| n != 1).count();
        // Every 50th sequence also goes through the on-disk store, with redelivery.
        if seq % 50 == 0 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            {
                let mut disk = PersistentStore::open(dir.path(), badges.clone()).map_err(|e| e.to_string())?;
                for p in 0..PLAYERS {
                    disk.register(
                        PlayerId::new(format!("player-{p}")),
                        &format!("name_{}", PLAYERS - p),
                        0,
                        (p / 2) as u64,
                    )
                    .map_err(|e| e.to_string())?;
                }
                for sum in delivered.iter().chain(delivered.iter()) {
                    disk.apply_summary(sum).map_err(|e| e.to_string())?;
                }
            }
            let reopened = PersistentStore::open(dir.path(), badges.clone()).map_err(|e| e.to_string())?;
            let a: Vec<_> = store.profiles().cloned().collect();
            let b: Vec<_> = reopened.store().profiles().cloned().collect();
            persisted_mismatch += usize::from(a != b);
        }
    }
    let pass = dup_effects == 0 && repeat_unlocks == 0 && missed_unlocks == 0 && misordered == 0 && persisted_mismatch == 0;
    Ok((
        pass,
        format!(
            "{SEQUENCES} sequences, {applied} summaries + {duplicates} redeliveries, {all_unlocks} unlocks: \
             {dup_effects} wrong effects, {repeat_unlocks} repeated unlocks, {missed_unlocks} missed unlocks, \
             {misordered} misordered boards, {persisted_mismatch} persisted mismatches"
        ),
    ))
}

fn protocol_goldens(inputs: &Inputs) -> Result<(bool, String), String> {
    let dir = inputs.fixtures.join("protocol");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    files.sort();
    let mut seen = BTreeSet::new();
    let mut drifted = Vec::new();
    for path in &files {
        let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
        let frame = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Frame::Text(String::from_utf8(bytes.clone()).map_err(|e| e.to_string())?),
            _ => Frame::Binary(bytes.clone()),
        };
        let msg = decode(&frame).map_err(|e| format!("{}: {e}", path.display()))?;
        seen.insert(msg.body.type_name());
        let again = match encode(&msg) {
            Frame::Text(t) => t.into_bytes(),
            Frame::Binary(b) => b,
        };
        if again != bytes || decode(&encode(&msg)).ok().as_ref() != Some(&msg) {
            drifted.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
    }
    let missing: Vec<&str> = MESSAGE_TYPES.iter().copied().filter(|t| !seen.contains(t)).collect();

    // Quantization: every axis value decodes within extent / 2^16.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_ratio = 0.0_f64;
    for _ in 0..100_000 {
        let lo = rng.random_range(-5.0..5.0);
        let extent = rng.random_range(1e-3..10.0);
        let v = lo + rng.random::<f64>() * extent;
        let back = dequantize_axis(quantize_axis(v, lo, lo + extent), lo, lo + extent);
        worst_ratio = worst_ratio.max((back - v).abs() / (extent / 65536.0));
    }
    // A real cloud survives the binary frame unchanged.
    let assets = inputs.assets()?;
    let script = inputs.script("pack_box_success.script")?;
    let session = fresh_session(&assets, &script)?;
    let chunk = capture_cloud(&session, 1, 512);
    let msg = WireMessage::new(1, Body::CloudChunk(chunk));
    let cloud_ok = decode(&encode(&msg)).ok().as_ref() == Some(&msg);

    Ok((
        drifted.is_empty() && missing.is_empty() && worst_ratio <= 1.0 && cloud_ok,
        format!(
            "{} golden frames, drifted {drifted:?}, types missing {missing:?}; worst quantization error {worst_ratio:.3} of extent/2^16; cloud frame round trip {}",
            files.len(),
            if cloud_ok { "ok" } else { "differs" }
        ),
    ))
}

fn end_to_end(inputs: &Inputs) -> Result<(bool, String), String> {
    let bin = inputs.teleop_bin.as_ref().ok_or("no teleop binary given")?;
    let data = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut server = Command::new(bin)
        .args(["serve", "--port", "0", "--config"])
        .arg(&inputs.config)
        .arg("--out-dir")
        .arg(data.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| format!("cannot start {}: {e}", bin.display()))?;
    let result = drive_bots(inputs, bin, &mut server, data.path());
    let _ = server.kill();
    let _ = server.wait();
    result
}

fn drive_bots(
    inputs: &Inputs,
    bin: &Path,
    server: &mut std::process::Child,
    data: &Path,
) -> Result<(bool, String), String> {
    let stdout = server.stdout.take().ok_or("server stdout")?;
    let mut banner = String::new();
    BufReader::new(stdout)
        .read_line(&mut banner)
        .map_err(|e| e.to_string())?;
    let ready: serde_json::Value = serde_json::from_str(&banner).map_err(|e| format!("banner {banner:?}: {e}"))?;
    let addr = ready["addr"].as_str().ok_or("banner without addr")?;
    let url = format!("ws://{addr}");

    let mut pass = true;
    let mut notes = Vec::new();
    for (task, script, stages) in E2E_SCRIPTS {
        let out = Command::new(bin)
            .args(["bot", "--server", &url, "--task", task, "--script"])
            .arg(inputs.fixtures.join("scripts").join(script))
            .stderr(Stdio::null())
            .output()
            .map_err(|e| e.to_string())?;
        let report: serde_json::Value = String::from_utf8_lossy(&out.stdout)
            .lines()
            .last()
            .and_then(|l| serde_json::from_str(l).ok())
            .unwrap_or_default();
        let session = report["session"].as_str().unwrap_or_default().to_string();
        let episode = find_episode(data, &session);
        let achieved = episode
            .as_ref()
            .map(|m| m.stage_results.iter().filter(|s| s.achieved).count());
        let ok = out.status.code() == Some(0)
            && !session.is_empty()
            && episode.as_ref().is_some_and(|m| m.success)
            && achieved == Some(stages);
        pass &= ok;
        notes.push(format!(
            "{task}: exit {:?}, episode success {:?}, stages {:?}/{stages}",
            out.status.code(),
            episode.as_ref().map(|m| m.success),
            achieved
        ));
    }
    Ok((pass, notes.join("; ")))
}

/// The first persisted episode of `session` under a server data dir.
fn find_episode(data: &Path, session: &str) -> Option<EpisodeMeta> {
    if session.is_empty() {
        return None;
    }
    // Episodes land shortly before the summary; allow the rename to settle.
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let dirs = episode_dirs(&data.join("episodes")).unwrap_or_default();
        let found = dirs
            .iter()
            .filter_map(|d| read_episode(d).ok())
            .map(|e| e.meta)
            .find(|m| m.episode_id.starts_with(session));
        if found.is_some() || Instant::now() > deadline {
            return found;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}

