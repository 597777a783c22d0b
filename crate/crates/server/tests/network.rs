use std::path::{Path, PathBuf};
use std::time::Duration;

use teleop_core::dataset::read_episode;
use teleop_core::gateway::wire::{ErrorCode, Input, Leaderboard};
use teleop_core::gateway::{Body, Frame, LatencyModel};
use teleop_core::script::Script;
use teleop_core::session::Phase;
use teleop_core::task::{AttemptOutcome, TaskId};
use teleop_server::bot::{run_bot, BotConfig};
use teleop_server::client::{session_url, Client, ClientError};
use teleop_server::{ConfigError, Loaded, ServeError, Server, ServerConfig, ServerHandle};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn script(name: &str) -> Script {
    Script::load(&repo().join("fixtures/scripts").join(name)).expect("shipped script parses")
}

fn loaded(data: &Path) -> Loaded {
    let mut config = ServerConfig::load(&repo().join("config/server.toml")).expect("shipped config");
    config.server.bind = "127.0.0.1:0".parse().unwrap();
    config.server.countdown_s = 0.0;
    config.server.disconnect_grace_s = 0.5;
    config.paths.data = data.to_path_buf();
    config.load_assets().expect("shipped assets")
}

async fn start(data: &Path) -> ServerHandle {
    Server::bind(loaded(data)).await.expect("bind").spawn()
}

fn base(server: &ServerHandle) -> String {
    server.url("")
}

async fn lobby(server: &ServerHandle, user: &str) -> (Client, String) {
    let mut c = Client::connect(&server.url("/lobby")).await.unwrap();
    c.hello("test").await.unwrap();
    let grant = c.login(user).await.unwrap();
    (c, grant.token)
}

fn expect_error(r: Result<impl std::fmt::Debug, ClientError>, code: ErrorCode) {
    match r {
        Err(ClientError::Server(e)) => assert_eq!(e.code, code, "{e:?}"),
        other => panic!("expected {code:?}, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bots_complete_success_scripts_and_persist_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let mut runs = Vec::new();
    for (name, model) in [
        ("arrange_desk_success.script", LatencyModel::NONE),
        ("animal_dorms_success.script", LatencyModel::NONE),
        ("animal_dorms_success.script", LatencyModel::wan(3)),
    ] {
        let mut config = BotConfig::new(base(&server));
        config.username = format!("bot{}", runs.len());
        config.latency = model;
        let s = script(name);
        runs.push(tokio::spawn(async move { run_bot(&s, &config).await }));
    }
    for run in runs {
        let report = run.await.unwrap().expect("bot run");
        assert!(report.matched(), "{:?}", report.summary.attempts);
        let finished = server.finished(&report.session).expect("session recorded");
        assert_eq!(finished.episodes.len(), 1);
        let ep = read_episode(&finished.episodes[0]).unwrap();
        assert!(ep.meta.success);
        let exp = report.expectation.as_ref().unwrap();
        assert_eq!(ep.meta.stage_results.iter().filter(|s| s.achieved).count(), exp.stages);
    }
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn disconnect_records_an_incomplete_episode() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let report = run_bot(&script("pack_box_disconnect.script"), &BotConfig::new(base(&server)))
        .await
        .unwrap();
    assert!(report.disconnected);
    assert_eq!(report.summary.attempts[0].outcome, AttemptOutcome::Incomplete);
    let finished = server.finished(&report.session).unwrap();
    let ep = read_episode(&finished.episodes[0]).unwrap();
    assert!(!ep.meta.success);
    assert!(!ep.transitions.is_empty());
    server.shutdown().await;
}

#[tokio::test]
async fn operator_slot_is_exclusive_and_spectators_are_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let (mut op, token) = lobby(&server, "alice").await;
    let session = op.create_session(&TaskId::new("AnimalDorms"), Some(5)).await.unwrap();

    // Same player, second connection, operator role.
    let mut second = Client::connect(&session_url(&base(&server), session, "operator", &token))
        .await
        .unwrap();
    expect_error(second.recv_until("join", |_| None::<()>).await, ErrorCode::OperatorSlotTaken);

    // Another player cannot take the operator role either.
    let (mut bob, bob_token) = lobby(&server, "bob").await;
    bob.send(Body::JoinOperator(teleop_core::gateway::wire::Join::Request {
        session: Some(session),
        task: None,
        seed: None,
    }))
    .await
    .unwrap();
    expect_error(bob.recv_until("join", |_| None::<()>).await, ErrorCode::Unauthorized);

    let mut spec = Client::connect(&session_url(&base(&server), session, "spectator", &bob_token))
        .await
        .unwrap();
    // Accepted, then a keyframe.
    let first = spec.recv().await.unwrap().unwrap();
    assert!(matches!(first.body, Body::JoinSpectator(_)), "{first:?}");
    let snap = spec.recv().await.unwrap().unwrap();
    match snap.body {
        Body::StateUpdate(s) => {
            assert!(s.keyframe);
            assert_eq!(s.phase, Phase::Lobby);
        }
        other => panic!("expected keyframe, got {other:?}"),
    }
    spec.send(Body::Input(Input::Start)).await.unwrap();
    expect_error(spec.recv_until("reject", |_| None::<()>).await, ErrorCode::ReadOnly);
    spec.send(Body::LeaderboardUpdate(Leaderboard::Request { top: 5 })).await.unwrap();
    spec.recv_until("leaderboard", |m| matches!(m.body, Body::LeaderboardUpdate(_)).then_some(()))
        .await
        .unwrap();
    server.shutdown().await;
}

#[tokio::test]
async fn bad_tokens_and_bad_frames() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let (mut op, _) = lobby(&server, "carol").await;
    let session = op.create_session(&TaskId::new("PackBox"), None).await.unwrap();

    let mut intruder = Client::connect(&session_url(&base(&server), session, "spectator", "carol.00"))
        .await
        .unwrap();
    let first = intruder.recv().await.unwrap().unwrap();
    match first.body {
        Body::Error(e) => assert_eq!(e.code, ErrorCode::Unauthorized),
        other => panic!("state leaked: {other:?}"),
    }
    assert!(intruder.recv().await.unwrap().is_none(), "connection closes after rejection");

    let mut c = Client::connect(&server.url("/lobby")).await.unwrap();
    c.send_raw(Frame::Text(r#"{"v":9,"type":"hello","seq":1,"payload":{}}"#.into()))
        .await
        .unwrap();
    match c.recv().await.unwrap().unwrap().body {
        Body::Error(e) => {
            assert_eq!(e.code, ErrorCode::UnsupportedVersion);
            assert_eq!(e.supported, vec![1]);
        }
        other => panic!("{other:?}"),
    }
    c.send_raw(Frame::Text(r#"{"v":1,"type":"hel"#.into())).await.unwrap();
    match c.recv().await.unwrap().unwrap().body {
        Body::Error(e) => assert_eq!(e.code, ErrorCode::Malformed),
        other => panic!("{other:?}"),
    }
    // The connection survives both.
    c.hello("test").await.unwrap();
    let err = c
        .create_session(&TaskId::new("PackBox"), None)
        .await
        .expect_err("join before login");
    expect_error(Err::<(), _>(err), ErrorCode::Unauthorized);
    c.login("dave").await.unwrap();
    expect_error(c.create_session(&TaskId::new("Nope"), None).await, ErrorCode::UnknownTask);
    expect_error(c.spectate(teleop_core::session::SessionId([1; 16])).await, ErrorCode::SessionNotFound);
    server.shutdown().await;
}

#[tokio::test]
async fn resume_and_progression_survive_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let (mut op, token) = lobby(&server, "erin").await;
    op.create_session(&TaskId::new("ScanBottle"), Some(1)).await.unwrap();
    op.send(Body::Input(Input::Start)).await.unwrap();
    op.send(Body::SessionEnd(teleop_core::gateway::wire::SessionEnd::Request))
        .await
        .unwrap();
    let (summary, profile) = op
        .recv_until("summary", |m| match &m.body {
            Body::SessionEnd(teleop_core::gateway::wire::SessionEnd::Summary { summary, profile, .. }) => {
                Some((summary.clone(), profile.clone()))
            }
            _ => None,
        })
        .await
        .unwrap();
    assert_eq!(summary.attempts.len(), 1);
    assert_eq!(profile.unwrap().games_played, 1);

    let mut again = Client::connect(&server.url("/lobby")).await.unwrap();
    let grant = again.resume(&token).await.unwrap();
    assert_eq!(grant.profile.username, "erin");
    assert_eq!(grant.profile.episodes_played, 1);
    expect_error(again.resume("erin.ffff").await, ErrorCode::Unauthorized);
    server.shutdown().await;
}

#[tokio::test]
async fn port_in_use_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let mut l = loaded(dir.path());
    l.config.server.bind = server.addr();
    match Server::bind(l).await {
        Err(ServeError::PortInUse(addr)) => assert_eq!(addr, server.addr()),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("second bind succeeded"),
    }
    server.shutdown().await;
}

#[test]
fn missing_task_directory_is_named() {
    let mut config = ServerConfig::load(&repo().join("config/server.toml")).unwrap();
    config.paths.tasks = PathBuf::from("/nonexistent/tasks");
    match config.load_assets() {
        Err(ConfigError::Load { path, .. }) => assert_eq!(path, PathBuf::from("/nonexistent/tasks")),
        other => panic!("{other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_ends_live_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path()).await;
    let (mut op, _) = lobby(&server, "frank").await;
    let id = op.create_session(&TaskId::new("PackBox"), Some(2)).await.unwrap();
    op.send(Body::Input(Input::Start)).await.unwrap();
    tokio::time::sleep(Duration::from_millis(300)).await;
    assert_eq!(server.live_sessions().len(), 1);
    let stats = server.metrics(&id).unwrap();
    assert!(!stats.tick_times.is_empty());
    let handle = tokio::spawn(async move {
        op.recv_until("summary", |m| matches!(m.body, Body::SessionEnd(_)).then_some(()))
            .await
    });
    server.shutdown().await;
    handle.await.unwrap().unwrap();
}
