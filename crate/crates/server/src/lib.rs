//! WebSocket front end for the teleoperation platform.
//!
//! Clients connect to `/lobby` to negotiate the protocol, authenticate and
//! join a session, or straight to `/session/{id}?role=…&token=…` with a
//! token from an earlier login. Each session runs on its own task at 60 Hz
//! and is the only writer of its state; connections exchange messages with
//! it over channels.

pub mod bot;
pub mod client;
pub mod config;
mod conn;
mod hub;
mod live;
pub mod metrics;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use teleop_core::gateway::auth::TokenSigner;
use teleop_core::progression::PersistentStore;
use teleop_core::session::SessionId;
use teleop_core::task::TaskId;

pub use config::{ConfigError, Loaded, ServerConfig};
pub use hub::{FinishedSession, AGENT};
pub use metrics::{Cadence, SessionMetrics};

use hub::Hub;
use live::SessionMsg;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("address {0} is already in use")]
    PortInUse(SocketAddr),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot open progression store: {0}")]
    Progression(String),
    #[error("cannot create {0}: {1}")]
    DataDir(std::path::PathBuf, std::io::Error),
}

/// A bound, not yet running server.
pub struct Server {
    hub: Arc<Hub>,
    listener: TcpListener,
}

impl Server {
    /// Opens the data directory and binds the listening socket.
    pub async fn bind(loaded: Loaded) -> Result<Self, ServeError> {
        let Loaded {
            config,
            catalog,
            arm,
            badges,
        } = loaded;
        let episodes = config.episodes_dir();
        std::fs::create_dir_all(&episodes).map_err(|e| ServeError::DataDir(episodes.clone(), e))?;
        let store = PersistentStore::open(&config.progression_dir(), badges)
            .map_err(|e| ServeError::Progression(e.to_string()))?;
        let signer = match &config.server.token_key {
            Some(key) => TokenSigner::new(key.as_bytes()),
            None => TokenSigner::random(),
        };
        let addr = config.server.bind;
        let listener = TcpListener::bind(addr).await.map_err(|source| match source.kind() {
            std::io::ErrorKind::AddrInUse => ServeError::PortInUse(addr),
            _ => ServeError::Bind { addr, source },
        })?;
        let hub = Arc::new(Hub::new(config, catalog, arm, signer, store));
        Ok(Self { hub, listener })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Serves until `shutdown` resolves, then ends every live session.
    pub async fn run_until(self, shutdown: impl Future<Output = ()>) {
        let Server { hub, listener } = self;
        tokio::pin!(shutdown);
        loop {
            tokio::select! {
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        log::debug!("connection from {peer}");
                        tokio::spawn(conn::serve_connection(hub.clone(), stream));
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                },
                _ = &mut shutdown => break,
            }
        }
        shutdown_sessions(&hub).await;
    }

    /// Runs the server on the current runtime.
    pub fn spawn(self) -> ServerHandle {
        let addr = self.local_addr();
        let hub = self.hub.clone();
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let task = tokio::spawn(self.run_until(async {
            let _ = rx.await;
        }));
        ServerHandle {
            addr,
            hub,
            stop: Some(tx),
            task,
        }
    }
}

async fn shutdown_sessions(hub: &Arc<Hub>) {
    let live: Vec<_> = hub.sessions.lock().expect("sessions lock").values().cloned().collect();
    for s in &live {
        let _ = s.tx.send(SessionMsg::Shutdown);
    }
    while !hub.sessions.lock().expect("sessions lock").is_empty() {
        tokio::time::sleep(std::time::Duration::from_millis(5)).await;
    }
}

/// A server running in the background of the current runtime.
pub struct ServerHandle {
    addr: SocketAddr,
    hub: Arc<Hub>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("ws://{}{path}", self.addr)
    }

    pub fn live_sessions(&self) -> Vec<(SessionId, TaskId)> {
        let sessions = self.hub.sessions.lock().expect("sessions lock");
        sessions.iter().map(|(id, s)| (*id, s.task.clone())).collect()
    }

    /// Cadence measurements of a live or finished session.
    pub fn metrics(&self, id: &SessionId) -> Option<SessionMetrics> {
        if let Some(m) = self.hub.live_metrics.lock().expect("metrics lock").get(id) {
            return Some(m.lock().expect("metrics lock").clone());
        }
        self.finished(id).map(|f| f.metrics)
    }

    pub fn finished(&self, id: &SessionId) -> Option<FinishedSession> {
        self.hub.finished.lock().expect("finished lock").get(id).cloned()
    }

    /// Stops accepting, ends live sessions and waits for them.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}
