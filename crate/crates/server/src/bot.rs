//! Headless network clients: a scripted operator and a passive spectator.

use std::time::Duration;

use tokio::time::{Instant, MissedTickBehavior};

use teleop_core::gateway::wire::{Input, SessionEnd, StateUpdate};
use teleop_core::gateway::{Body, LatencyModel, Link};
use teleop_core::script::{Expectation, Script, ScriptPlayer};
use teleop_core::session::{Phase, SessionId, SessionSummary};
use teleop_core::task::{GameEvent, GameEventKind};

use crate::client::{session_url, Client, ClientError};

/// How often the bot checks for due script steps.
const POLL: Duration = Duration::from_millis(4);

#[derive(Debug, Clone)]
pub struct BotConfig {
    /// `ws://host:port`, without a path.
    pub server: String,
    pub username: String,
    /// Delay applied to the bot's outbound inputs.
    pub latency: LatencyModel,
    /// Overrides the script's seed.
    pub seed: Option<u64>,
    /// Upper bound on the whole run.
    pub timeout: Duration,
}

impl BotConfig {
    pub fn new(server: impl Into<String>) -> Self {
        Self {
            server: server.into(),
            username: "bot".into(),
            latency: LatencyModel::NONE,
            seed: None,
            timeout: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BotReport {
    pub session: SessionId,
    pub summary: SessionSummary,
    pub events: Vec<GameEvent>,
    pub states_received: usize,
    /// The script's disconnect step was taken.
    pub disconnected: bool,
    pub expectation: Option<Expectation>,
}

impl BotReport {
    /// Whether the first attempt ended as the script expects.
    pub fn matched(&self) -> bool {
        let Some(exp) = &self.expectation else {
            return true;
        };
        self.summary.attempts.first().is_some_and(|a| {
            a.outcome == exp.outcome && a.stage_results.iter().filter(|s| s.achieved).count() == exp.stages
        })
    }
}

fn summary_of(body: &Body) -> Option<SessionSummary> {
    match body {
        Body::SessionEnd(SessionEnd::Summary { summary, .. }) => Some(summary.clone()),
        _ => None,
    }
}

/// Plays one attempt of `script` as a network operator, then ends the session.
pub async fn run_bot(script: &Script, config: &BotConfig) -> Result<BotReport, ClientError> {
    tokio::time::timeout(config.timeout, drive(script, config))
        .await
        .map_err(|_| ClientError::Timeout("the session to end"))?
}

async fn drive(script: &Script, config: &BotConfig) -> Result<BotReport, ClientError> {
    let mut client = Client::connect(&format!("{}/lobby", config.server)).await?;
    client.hello(crate::AGENT).await?;
    let grant = client.login(&config.username).await?;
    let session = client
        .create_session(&script.task, Some(config.seed.unwrap_or(script.seed)))
        .await?;
    client.send(Body::Input(Input::Start)).await?;

    let started = Instant::now();
    let ms = |t: Instant| t.duration_since(started).as_secs_f64() * 1000.0;
    let mut link: Link<Body> = Link::new(config.latency);
    let mut player = ScriptPlayer::new(script);
    let mut events = Vec::new();
    let mut states = 0usize;
    // Server attempt clock at a local instant.
    let mut anchor: Option<(f64, Instant)> = None;
    let mut attempt_over = false;
    let mut ticker = tokio::time::interval(POLL);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Skip);

    while !attempt_over {
        tokio::select! {
            msg = client.recv() => {
                let msg = msg?.ok_or(ClientError::Closed)?;
                match msg.body {
                    Body::Event(e) => {
                        match e.kind {
                            GameEventKind::AttemptStart { .. } => anchor = Some((0.0, Instant::now())),
                            GameEventKind::AttemptEnd { .. } => attempt_over = true,
                            _ => {}
                        }
                        events.push(e);
                    }
                    Body::StateUpdate(s) => {
                        states += 1;
                        if s.phase == Phase::Playing {
                            anchor = Some((s.clock, Instant::now()));
                        }
                    }
                    Body::Error(e) => return Err(ClientError::Server(e)),
                    Body::SessionEnd(_) => return Err(ClientError::Unexpected("session_end")),
                    _ => {}
                }
            }
            _ = ticker.tick() => {
                let now = Instant::now();
                if let Some((clock, at)) = anchor {
                    let est = clock + now.duration_since(at).as_secs_f64();
                    if script.disconnect_at.is_some_and(|t| est >= t) {
                        client.close().await;
                        return observe_end(script, config, session, &grant.token, events, states).await;
                    }
                    if let Some(input) = player.due(est) {
                        link.send(ms(now), Body::Input(Input::Joint {
                            target_q: input.target_q,
                            gripper_closed: input.gripper_closed,
                            client_timestamp: ms(now) as u64,
                        }), false);
                    }
                }
                for body in link.poll(ms(now)) {
                    client.send(body).await?;
                }
            }
        }
    }

    client.send(Body::SessionEnd(SessionEnd::Request)).await?;
    let summary = client
        .recv_until("session_end", |m| {
            if let Body::Event(e) = &m.body {
                events.push(e.clone());
            }
            summary_of(&m.body)
        })
        .await?;
    client.close().await;
    Ok(BotReport {
        session,
        summary,
        events,
        states_received: states,
        disconnected: false,
        expectation: script.expect.clone(),
    })
}

/// After a scripted disconnect, watches the session as a spectator until the
/// server gives up on the operator and publishes the summary.
async fn observe_end(
    script: &Script,
    config: &BotConfig,
    session: SessionId,
    token: &str,
    mut events: Vec<GameEvent>,
    states: usize,
) -> Result<BotReport, ClientError> {
    let mut watcher = Client::connect(&session_url(&config.server, session, "spectator", token)).await?;
    let summary = watcher
        .recv_until("session_end", |m| {
            if let Body::Event(e) = &m.body {
                events.push(e.clone());
            }
            summary_of(&m.body)
        })
        .await?;
    watcher.close().await;
    Ok(BotReport {
        session,
        summary,
        events,
        states_received: states,
        disconnected: true,
        expectation: script.expect.clone(),
    })
}

/// Everything a spectator saw, with local arrival times in seconds.
#[derive(Debug, Clone, Default)]
pub struct Observation {
    pub states: Vec<(f64, StateUpdate)>,
    pub events: Vec<(f64, GameEvent)>,
    pub clouds: Vec<f64>,
    pub summary: Option<SessionSummary>,
}

/// Joins `session` as a spectator and records what arrives until it ends.
pub async fn spectate(server: &str, username: &str, session: SessionId) -> Result<Observation, ClientError> {
    let mut client = Client::connect(&format!("{server}/lobby")).await?;
    client.hello(crate::AGENT).await?;
    client.login(username).await?;
    client.spectate(session).await?;
    let started = Instant::now();
    let mut obs = Observation::default();
    while let Some(msg) = client.recv().await? {
        let t = started.elapsed().as_secs_f64();
        match msg.body {
            Body::StateUpdate(s) => obs.states.push((t, *s)),
            Body::Event(e) => obs.events.push((t, e)),
            Body::CloudChunk(_) => obs.clouds.push(t),
            Body::SessionEnd(SessionEnd::Summary { summary, .. }) => obs.summary = Some(summary),
            Body::Error(e) => return Err(ClientError::Server(e)),
            _ => {}
        }
    }
    Ok(obs)
}
