//! `teleop`: run the server, drive it headlessly, and work with recorded data.
//!
//! Every command writes line-delimited JSON to stdout; logs go to stderr.
//! Exit codes are listed in [`teleop_cli::exit`].

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use teleop_cli::acceptance::{self, Inputs, CRITERIA};
use teleop_cli::exit;
use teleop_cli::load::{run_load, LoadOptions, TOLERANCE};
use teleop_core::dataset::{read_episode, replay, CotrainSampler, DatasetIndex, Source, SourceEpisode, SourceLabel};
use teleop_core::gateway::harness::{self, HarnessConfig};
use teleop_core::gateway::wire::SessionEnd;
use teleop_core::gateway::{Body, LatencyModel};
use teleop_core::progression::PersistentStore;
use teleop_core::script::Script;
use teleop_core::session::SessionId;
use teleop_core::task::TaskId;
use teleop_server::bot::{run_bot, BotConfig};
use teleop_server::client::{Client, ClientError};
use teleop_server::{Loaded, ServeError, Server, ServerConfig, AGENT};

#[derive(Parser)]
#[command(name = "teleop", version, about = "Gamified robot teleoperation: server, bot and dataset tools")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the WebSocket server until interrupted.
    Serve(ServeArgs),
    /// Load and check the config with its arm, task and badge files.
    Validate(ConfigArgs),
    /// Play a script as a network operator and report the session summary.
    Bot(BotArgs),
    /// Play a script through the simulated network and check spectator consistency.
    Harness(HarnessArgs),
    /// Run an in-process server with one scripted operator and many spectators.
    Load(LoadArgs),
    /// Watch a live session as a spectator and write what arrives as JSONL.
    Record(RecordArgs),
    /// Re-run recorded episodes and compare them with the recording.
    Replay(ReplayArgs),
    /// List the episodes under a dataset root.
    Inspect(InspectArgs),
    /// Draw co-training batches from a dataset.
    Sample(SampleArgs),
    /// Print the leaderboard from a server's data directory.
    Leaderboard(LeaderboardArgs),
    /// Run the acceptance criteria.
    Accept(AcceptArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Server config file; other paths resolve relative to it.
    #[arg(long, default_value = "config/server.toml")]
    config: PathBuf,
}

#[derive(Args)]
struct LatencyArgs {
    /// Fixed one-way delay added to every message.
    #[arg(long)]
    latency_base_ms: Option<f64>,
    /// Half-width of uniform jitter around the base delay.
    #[arg(long)]
    latency_jitter_ms: Option<f64>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Listen port; 0 picks a free one.
    #[arg(long)]
    port: Option<u16>,
    /// Data directory for episodes and progression.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    latency: LatencyArgs,
    /// Seed of the outbound latency model.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BotArgs {
    /// Script file.
    #[arg(long)]
    script: PathBuf,
    /// Server base URL.
    #[arg(long, default_value = "ws://127.0.0.1:8080")]
    server: String,
    /// Expected task; must match the script's.
    #[arg(long)]
    task: Option<String>,
    /// Session seed; defaults to the script's.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    latency: LatencyArgs,
    #[arg(long, default_value = "bot")]
    username: String,
    /// Give up after this many seconds.
    #[arg(long, default_value_t = 600.0)]
    timeout_s: f64,
}

#[derive(Args)]
struct HarnessArgs {
    #[arg(long)]
    script: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 3)]
    spectators: usize,
    #[command(flatten)]
    latency: LatencyArgs,
    /// Share of non-keyframe state updates lost per spectator link.
    #[arg(long, default_value_t = 0.0)]
    drop_rate: f64,
    /// Base seed of the spectator links.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tick at which spectators join.
    #[arg(long, default_value_t = 0)]
    join_tick: u64,
}

#[derive(Args)]
struct LoadArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "fixtures/scripts/wander_60s.script")]
    script: PathBuf,
    #[arg(long, default_value_t = 8)]
    spectators: usize,
    #[arg(long, default_value_t = 50.0)]
    latency_base_ms: f64,
    /// Data directory; a temporary one when absent.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RecordArgs {
    #[arg(long, default_value = "ws://127.0.0.1:8080")]
    server: String,
    /// Session id (32 hex digits).
    #[arg(long)]
    session: String,
    #[arg(long, default_value = "recording")]
    out_dir: PathBuf,
    #[arg(long, default_value = "recorder")]
    username: String,
}

#[derive(Args)]
struct ReplayArgs {
    /// Episode directories or dataset roots.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct InspectArgs {
    /// Dataset root.
    #[arg(default_value = "data/episodes")]
    dataset: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Only this task.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct SampleArgs {
    /// Dataset root.
    #[arg(default_value = "data/episodes")]
    dataset: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Share of each batch drawn from source A.
    #[arg(long, default_value_t = 0.5)]
    split: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    batches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source A is this task and source B every other task; without it A is
    /// the target tasks and B the support tasks.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct LeaderboardArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Data directory; defaults to the config's.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct AcceptArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "fixtures")]
    fixtures: PathBuf,
    /// Run only these criteria.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(CRITERIA))]
    only: Vec<String>,
}

/// A failed command: exit code and message.
struct Fail(u8, String);

impl Fail {
    fn usage(e: impl std::fmt::Display) -> Self {
        Fail(exit::USAGE, e.to_string())
    }
    fn runtime(e: impl std::fmt::Display) -> Self {
        Fail(exit::FAILURE, e.to_string())
    }
}

type Outcome = Result<u8, Fail>;

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn runtime() -> Result<tokio::runtime::Runtime, Fail> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Fail::runtime)
}

fn load_config(path: &Path) -> Result<ServerConfig, Fail> {
    let mut config = ServerConfig::load(path).map_err(Fail::usage)?;
    config.apply_env(|k| std::env::var(k).ok()).map_err(Fail::usage)?;
    Ok(config)
}

fn assets(path: &Path) -> Result<Loaded, Fail> {
    load_config(path)?.load_assets().map_err(Fail::usage)
}

fn latency(args: &LatencyArgs, seed: u64) -> Result<LatencyModel, Fail> {
    let m = LatencyModel::new(
        args.latency_base_ms.unwrap_or(0.0),
        args.latency_jitter_ms.unwrap_or(0.0),
        0.0,
        seed,
    );
    m.validate().map_err(Fail::usage)?;
    Ok(m)
}

fn load_script(path: &Path) -> Result<Script, Fail> {
    Script::load(path).map_err(|e| Fail::usage(format!("{}: {e}", path.display())))
}

fn serve(args: ServeArgs) -> Outcome {
    let mut config = load_config(&args.config.config)?;
    if let Some(port) = args.port {
        config.server.bind.set_port(port);
    }
    if let Some(dir) = args.out_dir {
        config.paths.data = dir;
    }
    if let Some(v) = args.latency.latency_base_ms {
        config.latency.base_ms = v;
    }
    if let Some(v) = args.latency.latency_jitter_ms {
        config.latency.jitter_ms = v;
    }
    if let Some(v) = args.seed {
        config.latency.seed = v;
    }
    config.latency.model().validate().map_err(Fail::usage)?;
    let loaded = config.load_assets().map_err(Fail::usage)?;
    let data = loaded.config.paths.data.clone();
    let tasks = loaded.catalog.len();
    runtime()?.block_on(async move {
        let server = Server::bind(loaded).await.map_err(|e| match e {
            ServeError::PortInUse(_) => Fail(exit::PORT_IN_USE, e.to_string()),
            other => Fail::runtime(other),
        })?;
        emit(json!({
            "event": "ready",
            "addr": server.local_addr().to_string(),
            "url": format!("ws://{}/lobby", server.local_addr()),
            "data": data,
            "tasks": tasks,
        }));
        server
            .run_until(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await;
        emit(json!({"event": "stopped"}));
        Ok(exit::OK)
    })
}

fn validate(args: ConfigArgs) -> Outcome {
    let loaded = assets(&args.config)?;
    for spec in loaded.catalog.iter() {
        emit(json!({
            "task": spec.id,
            "role": spec.role,
            "stages": spec.stages.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
            "time_limit": spec.time_limit,
        }));
    }
    emit(json!({"event": "valid", "config": args.config, "tasks": loaded.catalog.len(), "badges": loaded.badges.badges.len()}));
    Ok(exit::OK)
}

fn client_fail(e: ClientError) -> Fail {
    Fail(exit::CONNECTION, e.to_string())
}

fn bot(args: BotArgs) -> Outcome {
    let script = load_script(&args.script)?;
    if let Some(task) = &args.task {
        if TaskId::from(task.as_str()) != script.task {
            return Err(Fail::usage(format!(
                "--task {task} does not match the script's task {}",
                script.task
            )));
        }
    }
    let mut config = BotConfig::new(args.server.trim_end_matches('/'));
    config.username = args.username;
    config.seed = args.seed;
    config.latency = latency(&args.latency, args.seed.unwrap_or(script.seed))?;
    config.timeout = Duration::from_secs_f64(args.timeout_s);
    let report = runtime()?.block_on(run_bot(&script, &config)).map_err(client_fail)?;
    let first = report.summary.attempts.first();
    let achieved = first.map(|a| a.stage_results.iter().filter(|s| s.achieved).count());
    let matched = report.matched();
    emit(json!({
        "event": "bot_report",
        "session": report.session.to_hex(),
        "task": report.summary.task,
        "matched": matched,
        "outcome": first.map(|a| a.outcome.clone()),
        "stages_achieved": achieved,
        "expected": report.expectation.as_ref().map(|e| json!({"outcome": e.outcome, "stages": e.stages})),
        "points": report.summary.total_points,
        "episodes": report.summary.attempts.iter().map(|a| a.episode_id.clone()).collect::<Vec<_>>(),
        "events": report.events.len(),
        "states_received": report.states_received,
        "disconnected": report.disconnected,
        "summary": report.summary,
    }));
    Ok(if matched { exit::OK } else { exit::MISMATCH })
}

fn harness_cmd(args: HarnessArgs) -> Outcome {
    let script = load_script(&args.script)?;
    let loaded = assets(&args.config.config)?;
    let spec = loaded.catalog.get(&script.task).map_err(Fail::usage)?.clone();
    let mut models = Vec::new();
    for i in 0..args.spectators {
        let mut m = latency(&args.latency, args.seed + i as u64)?;
        m.drop_rate = args.drop_rate;
        m.validate().map_err(Fail::usage)?;
        models.push(m);
    }
    let config = HarnessConfig {
        spectators: models,
        join_ticks: vec![args.join_tick; args.spectators],
        ..HarnessConfig::default()
    };
    let r = harness::run(Arc::new(spec), Arc::new(loaded.arm), &script, &config);
    let mut all = true;
    for (i, t) in r.spectators.iter().enumerate() {
        let ok = r.spectator_ok(i);
        all &= ok;
        emit(json!({
            "spectator": i,
            "consistent": ok,
            "prefix_consistent": r.prefix_consistent(t),
            "final_state_matches": r.final_state_matches(t),
            "events_complete": r.events_complete(t, r.join_event_index[i]),
            "states": t.states.len(),
            "events": t.events.len(),
            "dropped": t.dropped,
            "bytes": t.bytes,
        }));
    }
    emit(json!({
        "event": "harness",
        "ticks": r.ticks,
        "issued_states": r.issued_states.len(),
        "events": r.events.len(),
        "outcome": r.summary.attempts.first().map(|a| a.outcome.clone()),
        "consistent": all,
    }));
    Ok(if all { exit::OK } else { exit::MISMATCH })
}

fn load_cmd(args: LoadArgs) -> Outcome {
    let script = load_script(&args.script)?;
    let tmp = tempfile::tempdir().map_err(Fail::runtime)?;
    let opts = LoadOptions {
        config: args.config.config,
        script,
        spectators: args.spectators,
        latency_ms: args.latency_base_ms,
        data_dir: args.out_dir.unwrap_or_else(|| tmp.path().to_path_buf()),
    };
    let report = runtime()?.block_on(run_load(&opts)).map_err(Fail::runtime)?;
    let pass = report.pass(TOLERANCE);
    let mut v = serde_json::to_value(&report).map_err(Fail::runtime)?;
    v["event"] = json!("load");
    v["pass"] = json!(pass);
    emit(v);
    Ok(if pass { exit::OK } else { exit::MISMATCH })
}

fn record(args: RecordArgs) -> Outcome {
    let session = SessionId::parse(&args.session).ok_or_else(|| Fail::usage(format!("invalid session id {:?}", args.session)))?;
    std::fs::create_dir_all(&args.out_dir).map_err(Fail::runtime)?;
    let path = args.out_dir.join(format!("{}.jsonl", session.to_hex()));
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path).map_err(Fail::runtime)?);
    let lines = runtime()?.block_on(async {
        use std::io::Write;
        let base = args.server.trim_end_matches('/');
        let mut client = Client::connect(&format!("{base}/lobby")).await.map_err(client_fail)?;
        client.hello(AGENT).await.map_err(client_fail)?;
        client.login(&args.username).await.map_err(client_fail)?;
        client.spectate(session).await.map_err(client_fail)?;
        let started = std::time::Instant::now();
        let mut lines = 0u64;
        while let Some(msg) = client.recv().await.map_err(client_fail)? {
            let t = started.elapsed().as_secs_f64();
            let line = match &msg.body {
                Body::StateUpdate(s) => json!({"t": t, "type": "state_update", "payload": s}),
                Body::Event(e) => json!({"t": t, "type": "event", "payload": e}),
                Body::OverlayUpdate(o) => json!({"t": t, "type": "overlay_update", "payload": o}),
                Body::CloudChunk(c) => json!({"t": t, "type": "cloud_chunk", "frame_id": c.frame_id, "points": c.points.len()}),
                Body::SessionEnd(SessionEnd::Summary { summary, .. }) => {
                    json!({"t": t, "type": "session_end", "payload": summary})
                }
                other => json!({"t": t, "type": other.type_name()}),
            };
            writeln!(out, "{line}").map_err(Fail::runtime)?;
            lines += 1;
        }
        out.flush().map_err(Fail::runtime)?;
        Ok::<_, Fail>(lines)
    })?;
    emit(json!({"event": "recorded", "session": session.to_hex(), "path": path, "lines": lines}));
    Ok(exit::OK)
}

/// Episode directories under `path`: itself if it holds a manifest, else two levels down.
fn collect_episodes(path: &Path, loaded: &Loaded) -> Result<Vec<PathBuf>, Fail> {
    if path.join(teleop_core::dataset::format::MANIFEST_FILE).exists() {
        return Ok(vec![path.to_path_buf()]);
    }
    let index = DatasetIndex::scan(path, &loaded.catalog).map_err(Fail::usage)?;
    Ok(index.episodes().iter().map(|e| e.dir.clone()).collect())
}

fn replay_cmd(args: ReplayArgs) -> Outcome {
    let loaded = assets(&args.config.config)?;
    let arm = Arc::new(loaded.arm.clone());
    let mut diverged = 0;
    let mut total = 0;
    for path in &args.paths {
        for dir in collect_episodes(path, &loaded)? {
            total += 1;
            let ep = read_episode(&dir).map_err(Fail::usage)?;
            let line = match replay(&ep, &loaded.catalog, arm.clone()) {
                Ok(r) => {
                    let exact = r.is_exact();
                    diverged += usize::from(!exact);
                    json!({
                        "episode": ep.meta.episode_id,
                        "exact": exact,
                        "divergence": r.divergence.map(|d| format!("{d:?}")),
                        "stages_achieved": r.stage_results.iter().filter(|s| s.achieved).count(),
                        "final_scene_hash": r.final_scene_hash,
                    })
                }
                Err(e) => {
                    diverged += 1;
                    json!({"episode": ep.meta.episode_id, "exact": false, "error": e.to_string()})
                }
            };
            emit(line);
        }
    }
    emit(json!({"event": "replay", "episodes": total, "diverged": diverged}));
    Ok(if diverged == 0 { exit::OK } else { exit::DIVERGENCE })
}

fn inspect(args: InspectArgs) -> Outcome {
    let loaded = assets(&args.config.config)?;
    let index = DatasetIndex::scan(&args.dataset, &loaded.catalog).map_err(Fail::usage)?;
    let task = args.task.map(|t| TaskId::from(t.as_str()));
    for e in index.episodes().iter().filter(|e| task.as_ref().is_none_or(|t| *t == e.meta.task)) {
        emit(json!({
            "episode": e.meta.episode_id,
            "task": e.meta.task,
            "label": e.label,
            "success": e.meta.success,
            "incomplete": e.meta.incomplete,
            "outcome": e.meta.outcome,
            "stages_achieved": e.meta.stage_results.iter().filter(|s| s.achieved).count(),
            "transitions": e.transitions,
            "dir": e.dir,
        }));
    }
    emit(json!({"event": "inspect", "episodes": index.len(), "by_task": index.counts_by_task()}));
    Ok(exit::OK)
}

fn sample(args: SampleArgs) -> Outcome {
    let loaded = assets(&args.config.config)?;
    let index = DatasetIndex::scan(&args.dataset, &loaded.catalog).map_err(Fail::usage)?;
    let (a, b): (Vec<SourceEpisode>, Vec<SourceEpisode>) = match &args.task {
        Some(t) => {
            let t = TaskId::from(t.as_str());
            loaded.catalog.get(&t).map_err(Fail::usage)?;
            (
                index.episodes().iter().filter(|e| e.meta.task == t).map(Into::into).collect(),
                index.episodes().iter().filter(|e| e.meta.task != t).map(Into::into).collect(),
            )
        }
        None => (
            index.with_label(SourceLabel::Target).map(Into::into).collect(),
            index.with_label(SourceLabel::Support).map(Into::into).collect(),
        ),
    };
    let mut sampler = CotrainSampler::new(a, b, args.batch, args.split, args.seed).map_err(Fail::usage)?;
    for n in 0..args.batches {
        let batch = sampler.sample_batch();
        let from_a = batch.iter().filter(|i| i.source == Source::A).count();
        emit(json!({"batch": n, "a": from_a, "b": batch.len() - from_a, "items": batch}));
    }
    Ok(exit::OK)
}

fn leaderboard(args: LeaderboardArgs) -> Outcome {
    let mut loaded = assets(&args.config.config)?;
    if let Some(dir) = args.out_dir {
        loaded.config.paths.data = dir;
    }
    let store = PersistentStore::open(&loaded.config.progression_dir(), loaded.badges).map_err(Fail::runtime)?;
    for e in store.store().leaderboard(args.top) {
        emit(serde_json::to_value(&e).map_err(Fail::runtime)?);
    }
    Ok(exit::OK)
}

fn accept(args: AcceptArgs) -> Outcome {
    let inputs = Inputs {
        config: args.config.config,
        fixtures: args.fixtures,
        teleop_bin: std::env::current_exe().ok(),
    };
    let names: Vec<&str> = if args.only.is_empty() {
        CRITERIA.to_vec()
    } else {
        CRITERIA.iter().copied().filter(|c| args.only.iter().any(|o| o == c)).collect()
    };
    let mut failed = 0;
    for name in names {
        let v = acceptance::run(name, &inputs).expect("known criterion");
        failed += usize::from(!v.pass);
        println!("{}", v.line());
    }
    emit(json!({"event": "accept", "failed": failed}));
    Ok(if failed == 0 { exit::OK } else { exit::MISMATCH })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Cmd::Serve(_)) { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    let outcome = match cli.command {
        Cmd::Serve(a) => serve(a),
        Cmd::Validate(a) => validate(a),
        Cmd::Bot(a) => bot(a),
        Cmd::Harness(a) => harness_cmd(a),
        Cmd::Load(a) => load_cmd(a),
        Cmd::Record(a) => record(a),
        Cmd::Replay(a) => replay_cmd(a),
        Cmd::Inspect(a) => inspect(a),
        Cmd::Sample(a) => sample(a),
        Cmd::Leaderboard(a) => leaderboard(a),
        Cmd::Accept(a) => accept(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(Fail(code, message)) => {
            emit(json!({"event": "error", "code": code, "message": message}));
            eprintln!("teleop: {message}");
            ExitCode::from(code)
        }
    }
}
