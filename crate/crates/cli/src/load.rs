//! The load scenario: one scripted operator and a group of spectators on a
//! live server over real sockets, with cadence measured at the server.

use std::path::PathBuf;
use std::time::Duration;

use serde::Serialize;

use teleop_core::gateway::LatencyModel;
use teleop_core::script::Script;
use teleop_core::session::{Phase, SessionId};
use teleop_server::bot::{run_bot, spectate, BotConfig, Observation};
use teleop_server::config::LatencySection;
use teleop_server::metrics::distinct;
use teleop_server::{Cadence, Server, ServerConfig};

pub const STATE_HZ: f64 = 20.0;
pub const RECORD_HZ: f64 = 12.0;
pub const TICK_HZ: f64 = 60.0;
pub const TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub config: PathBuf,
    pub script: Script,
    pub spectators: usize,
    /// Applied to every server-to-client frame and to the operator's inputs.
    pub latency_ms: f64,
    pub data_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rate {
    pub samples: usize,
    pub mean_hz: f64,
    /// RMS interval deviation over the nominal period.
    pub jitter: f64,
    pub max_interval_ms: f64,
}

impl Rate {
    fn of(times: &[f64], nominal_hz: f64) -> Option<Self> {
        Cadence::measure(times, nominal_hz).map(|c| Self {
            samples: c.samples,
            mean_hz: c.mean_hz,
            jitter: c.jitter,
            max_interval_ms: c.max_interval * 1000.0,
        })
    }

    fn rate_within(&self, nominal_hz: f64, tol: f64) -> bool {
        ((self.mean_hz - nominal_hz) / nominal_hz).abs() < tol
    }

    pub fn within(&self, nominal_hz: f64, tol: f64) -> bool {
        self.rate_within(nominal_hz, tol) && self.jitter < tol
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LoadReport {
    pub session: String,
    pub spectators: usize,
    pub latency_ms: f64,
    /// Span of the attempt, first to last recorded transition.
    pub window_s: f64,
    pub ticks: Option<Rate>,
    pub states: Option<Rate>,
    pub records: Option<Rate>,
    /// Arrival rate of live states at each spectator.
    pub spectator_states: Vec<Option<Rate>>,
    /// Spectators that received the session summary.
    pub spectators_complete: usize,
}

impl LoadReport {
    pub fn pass(&self, tol: f64) -> bool {
        self.states.is_some_and(|r| r.within(STATE_HZ, tol))
            && self.records.is_some_and(|r| r.within(RECORD_HZ, tol))
            && self.spectators_complete == self.spectators
            && self
                .spectator_states
                .iter()
                .all(|r| r.is_some_and(|r| r.rate_within(STATE_HZ, tol)))
    }
}

fn live_arrivals(obs: &Observation) -> Vec<f64> {
    obs.states
        .iter()
        .filter(|(_, s)| !s.keyframe && s.phase == Phase::Playing)
        .map(|(t, _)| *t)
        .collect()
}

/// Runs the scenario to the end of the session.
pub async fn run_load(opts: &LoadOptions) -> Result<LoadReport, String> {
    let mut config = ServerConfig::load(&opts.config).map_err(|e| e.to_string())?;
    config.server.bind = "127.0.0.1:0".parse().expect("literal address");
    config.server.countdown_s = 0.0;
    config.server.disconnect_grace_s = 0.5;
    config.server.max_spectators = config.server.max_spectators.max(opts.spectators);
    config.paths.data = opts.data_dir.clone();
    config.latency = LatencySection {
        base_ms: opts.latency_ms,
        ..LatencySection::default()
    };
    let loaded = config.load_assets().map_err(|e| e.to_string())?;
    let server = Server::bind(loaded).await.map_err(|e| e.to_string())?.spawn();
    let base = server.url("");

    let mut bot = BotConfig::new(base.clone());
    bot.username = "load-operator".into();
    bot.latency = LatencyModel::new(opts.latency_ms, 0.0, 0.0, 1);
    let script = opts.script.clone();
    let operator = tokio::spawn(async move { run_bot(&script, &bot).await });

    let id: SessionId = tokio::time::timeout(Duration::from_secs(10), async {
        loop {
            if let Some((id, _)) = server.live_sessions().first() {
                return *id;
            }
            tokio::time::sleep(Duration::from_millis(2)).await;
        }
    })
    .await
    .map_err(|_| "the operator never created a session".to_string())?;

    let watchers: Vec<_> = (0..opts.spectators)
        .map(|i| {
            let base = base.clone();
            tokio::spawn(async move { spectate(&base, &format!("spectator{i}"), id).await })
        })
        .collect();

    let op = operator
        .await
        .map_err(|e| e.to_string())?
        .map_err(|e| format!("operator: {e}"))?;
    let mut observations = Vec::new();
    for w in watchers {
        match w.await.map_err(|e| e.to_string())? {
            Ok(obs) => observations.push(obs),
            Err(e) => log::warn!("spectator failed: {e}"),
        }
    }
    let metrics = server
        .finished(&op.session)
        .ok_or("session was not recorded as finished")?
        .metrics;
    server.shutdown().await;

    let records = distinct(&metrics.record_times);
    let (start, end) = match (records.first(), records.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err("no transitions were recorded".into()),
    };
    let in_window = |times: &[f64]| -> Vec<f64> { times.iter().copied().filter(|t| (start..=end).contains(t)).collect() };
    let spectators_complete = observations.iter().filter(|o| o.summary.is_some()).count();
    let mut spectator_states: Vec<Option<Rate>> = observations
        .iter()
        .map(|o| Rate::of(&live_arrivals(o), STATE_HZ))
        .collect();
    spectator_states.resize(opts.spectators, None);
    Ok(LoadReport {
        session: id.to_hex(),
        spectators: opts.spectators,
        latency_ms: opts.latency_ms,
        window_s: end - start,
        ticks: Rate::of(&in_window(&metrics.tick_times), TICK_HZ),
        states: Rate::of(&in_window(&metrics.state_times), STATE_HZ),
        records: Rate::of(&records, RECORD_HZ),
        spectator_states,
        spectators_complete,
    })
}
