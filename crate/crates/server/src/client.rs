//! A minimal protocol client over WebSocket, used by the bot, the CLI and tests.

use futures_util::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use teleop_core::gateway::wire::{Auth, ErrorPayload, Hello, Join};
use teleop_core::gateway::{decode, encode, Body, Frame, WireError, WireMessage, PROTOCOL_VERSION};
use teleop_core::progression::{PlayerId, PlayerProfile};
use teleop_core::session::SessionId;
use teleop_core::task::TaskId;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect to {url}: {message}")]
    Connect { url: String, message: String },
    #[error("connection closed")]
    Closed,
    #[error("transport: {0}")]
    Transport(String),
    #[error("undecodable server frame: {0}")]
    Protocol(#[from] WireError),
    #[error("server error {:?}: {}", .0.code, .0.message)]
    Server(ErrorPayload),
    #[error("unexpected {0} message")]
    Unexpected(&'static str),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grant {
    pub player: PlayerId,
    pub token: String,
    pub profile: PlayerProfile,
}

pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    seq: u64,
}

impl Client {
    pub async fn connect(url: &str) -> Result<Self, ClientError> {
        let (ws, _) = tokio_tungstenite::connect_async(url).await.map_err(|e| ClientError::Connect {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            let _ = s.set_nodelay(true);
        }
        Ok(Self { ws, seq: 0 })
    }

    /// Sends `body` with the next sequence number and returns that number.
    pub async fn send(&mut self, body: Body) -> Result<u64, ClientError> {
        self.seq += 1;
        let msg = match encode(&WireMessage::new(self.seq, body)) {
            Frame::Text(t) => Message::text(t),
            Frame::Binary(b) => Message::binary(b),
        };
        self.ws.send(msg).await.map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(self.seq)
    }

    /// Sends an already encoded frame unchanged.
    pub async fn send_raw(&mut self, frame: Frame) -> Result<(), ClientError> {
        let msg = match frame {
            Frame::Text(t) => Message::text(t),
            Frame::Binary(b) => Message::binary(b),
        };
        self.ws.send(msg).await.map_err(|e| ClientError::Transport(e.to_string()))
    }

    /// The next message, or `None` once the server closed the connection.
    pub async fn recv(&mut self) -> Result<Option<WireMessage>, ClientError> {
        loop {
            let frame = match self.ws.next().await {
                None | Some(Ok(Message::Close(_))) => return Ok(None),
                Some(Err(e)) => return Err(ClientError::Transport(e.to_string())),
                Some(Ok(Message::Text(t))) => Frame::Text(t.as_str().to_owned()),
                Some(Ok(Message::Binary(b))) => Frame::Binary(b.to_vec()),
                Some(Ok(_)) => continue,
            };
            return Ok(Some(decode(&frame)?));
        }
    }

    /// Reads until `pick` accepts a message. Server errors that `pick`
    /// passes over end the wait.
    pub async fn recv_until<T>(
        &mut self,
        what: &'static str,
        mut pick: impl FnMut(&WireMessage) -> Option<T>,
    ) -> Result<T, ClientError> {
        loop {
            let msg = self.recv().await?.ok_or(ClientError::Closed)?;
            if let Some(t) = pick(&msg) {
                return Ok(t);
            }
            if let Body::Error(e) = msg.body {
                return Err(ClientError::Server(e));
            }
            log::trace!("skipping {} while waiting for {what}", msg.body.type_name());
        }
    }

    pub async fn hello(&mut self, agent: &str) -> Result<Hello, ClientError> {
        self.send(Body::Hello(Hello {
            versions: vec![PROTOCOL_VERSION],
            agent: agent.into(),
            tasks: Vec::new(),
        }))
        .await?;
        self.recv_until("hello", |m| match &m.body {
            Body::Hello(h) => Some(h.clone()),
            _ => None,
        })
        .await
    }

    async fn auth(&mut self, auth: Auth) -> Result<Grant, ClientError> {
        self.send(Body::Auth(auth)).await?;
        self.recv_until("auth", |m| match &m.body {
            Body::Auth(Auth::Granted {
                player_id,
                token,
                profile,
            }) => Some(Grant {
                player: player_id.clone(),
                token: token.clone(),
                profile: profile.clone(),
            }),
            _ => None,
        })
        .await
    }

    /// Registers `username`, or logs in when it exists.
    pub async fn login(&mut self, username: &str) -> Result<Grant, ClientError> {
        self.auth(Auth::Login {
            username: username.into(),
            avatar_id: 0,
        })
        .await
    }

    pub async fn resume(&mut self, token: &str) -> Result<Grant, ClientError> {
        self.auth(Auth::Resume { token: token.into() }).await
    }

    async fn join(&mut self, body: Body) -> Result<SessionId, ClientError> {
        self.send(body).await?;
        self.recv_until("join", |m| match &m.body {
            Body::JoinOperator(Join::Accepted { session, .. }) | Body::JoinSpectator(Join::Accepted { session, .. }) => {
                Some(*session)
            }
            _ => None,
        })
        .await
    }

    /// Starts a new session on `task` and takes its operator slot.
    pub async fn create_session(&mut self, task: &TaskId, seed: Option<u64>) -> Result<SessionId, ClientError> {
        self.join(Body::JoinOperator(Join::Request {
            session: None,
            task: Some(task.clone()),
            seed,
        }))
        .await
    }

    pub async fn spectate(&mut self, session: SessionId) -> Result<SessionId, ClientError> {
        self.join(Body::JoinSpectator(Join::Request {
            session: Some(session),
            task: None,
            seed: None,
        }))
        .await
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

/// `ws://host:port` plus the path for a direct session attach.
pub fn session_url(base: &str, session: SessionId, role: &str, token: &str) -> String {
    format!("{base}/session/{}?role={role}&token={token}", session.to_hex())
}
