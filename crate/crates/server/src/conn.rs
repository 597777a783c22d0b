//! One WebSocket connection: a reader that routes inbound frames and a
//! writer that drains the connection's outbox.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures_util::stream::{SplitSink, StreamExt};
use futures_util::SinkExt;
use tokio::net::TcpStream;
use tokio::sync::{oneshot, Notify};
use tokio::time::Instant;
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::http::StatusCode;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::WebSocketStream;

use teleop_core::gateway::wire::{ErrorCode, Join, Leaderboard};
use teleop_core::gateway::{
    decode, encode, Body, ConnId, Frame, LatencyModel, Link, Outbox, Role, SharedOutbox, Waker, WireMessage,
};
use teleop_core::progression::PlayerId;
use teleop_core::session::SessionId;

use crate::hub::{error, Hub};
use crate::live::{spawn_session, SessionMsg};

/// The parts of a connection the session task holds on to.
pub(crate) struct ConnShared {
    pub id: ConnId,
    pub outbox: SharedOutbox,
    notify: Notify,
    closing: AtomicBool,
}

impl ConnShared {
    pub fn new(id: ConnId, cap: usize) -> Arc<Self> {
        Arc::new(Self {
            id,
            outbox: Arc::new(Mutex::new(Outbox::new(cap))),
            notify: Notify::new(),
            closing: AtomicBool::new(false),
        })
    }

    pub fn waker(self: &Arc<Self>) -> Waker {
        let me = self.clone();
        Arc::new(move || me.notify.notify_one())
    }

    pub fn push(&self, body: Body) -> bool {
        let ok = self.outbox.lock().expect("outbox lock").push_reliable(body);
        self.notify.notify_one();
        ok
    }

    /// Flushes what is queued, then closes the socket.
    pub fn close(&self) {
        self.closing.store(true, Ordering::Release);
        self.notify.notify_one();
    }

    pub fn is_closing(&self) -> bool {
        self.closing.load(Ordering::Acquire)
    }
}

pub(crate) enum Route {
    Lobby,
    Session {
        id: Option<SessionId>,
        role: Option<Role>,
        token: Option<String>,
    },
}

/// `/lobby`, or `/session/{id}?role=…&token=…`.
pub(crate) fn parse_route(path: &str, query: Option<&str>) -> Option<Route> {
    if path == "/lobby" || path == "/" {
        return Some(Route::Lobby);
    }
    let id = path.strip_prefix("/session/")?;
    let mut role = None;
    let mut token = None;
    for pair in query.unwrap_or("").split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        match k {
            "role" => role = v.parse().ok(),
            "token" => token = Some(v.to_string()),
            _ => {}
        }
    }
    Some(Route::Session {
        id: SessionId::parse(id),
        role,
        token,
    })
}

fn to_message(msg: &WireMessage) -> Message {
    match encode(msg) {
        Frame::Text(t) => Message::text(t),
        Frame::Binary(b) => Message::binary(b),
    }
}

type Sink = SplitSink<WebSocketStream<TcpStream>, Message>;

/// Drains the outbox through an optional simulated delay, preserving order.
async fn write_loop(shared: Arc<ConnShared>, mut sink: Sink, latency: LatencyModel) {
    let mut link: Option<Link<()>> = (!latency.is_zero()).then(|| Link::new(latency));
    let start = Instant::now();
    let ms = |t: Instant| t.duration_since(start).as_secs_f64() * 1000.0;
    let mut delayed: VecDeque<(f64, WireMessage)> = VecDeque::new();
    loop {
        let (drained, overflowed) = {
            let mut o = shared.outbox.lock().expect("outbox lock");
            (o.drain(), o.overflowed())
        };
        if overflowed {
            log::warn!("connection {} overflowed its event queue; closing", shared.id);
            shared.close();
            let _ = sink.close().await;
            return;
        }
        let now = ms(Instant::now());
        for msg in drained {
            let droppable = matches!(&msg.body, Body::StateUpdate(s) if !s.keyframe);
            let due = match &mut link {
                None => Some(now),
                Some(link) => link.schedule(now, droppable),
            };
            if let Some(due) = due {
                delayed.push_back((due, msg));
            }
        }
        let now = ms(Instant::now());
        let mut sent = false;
        while delayed.front().is_some_and(|(due, _)| *due <= now) {
            let (_, msg) = delayed.pop_front().expect("front checked");
            if sink.feed(to_message(&msg)).await.is_err() {
                shared.close();
                return;
            }
            sent = true;
        }
        if sent && sink.flush().await.is_err() {
            shared.close();
            return;
        }
        if shared.is_closing() && delayed.is_empty() && shared.outbox.lock().expect("outbox lock").is_empty() {
            let _ = sink.close().await;
            return;
        }
        match delayed.front() {
            Some((due, _)) => {
                let deadline = start + Duration::from_secs_f64(due / 1000.0);
                tokio::select! {
                    _ = shared.notify.notified() => {}
                    _ = tokio::time::sleep_until(deadline) => {}
                }
            }
            None => shared.notify.notified().await,
        }
    }
}

struct Attached {
    session: SessionId,
    tx: tokio::sync::mpsc::UnboundedSender<SessionMsg>,
}

struct Conn {
    hub: Arc<Hub>,
    shared: Arc<ConnShared>,
    player: Option<PlayerId>,
    attached: Option<Attached>,
}

impl Conn {
    fn reply(&self, body: Body) {
        self.shared.push(body);
    }

    fn fail(&self, code: ErrorCode, message: impl Into<String>) {
        self.reply(error(code, message));
    }

    async fn attach(&mut self, session: SessionId, role: Role) -> bool {
        let Some(player) = self.player.clone() else {
            self.fail(ErrorCode::Unauthorized, "authenticate first");
            return false;
        };
        let Some(entry) = self.hub.session(&session) else {
            self.fail(ErrorCode::SessionNotFound, format!("no session {session}"));
            return false;
        };
        if role == Role::Operator && entry.operator != player {
            self.fail(ErrorCode::Unauthorized, "only the session's operator may control it");
            return false;
        }
        let (reply, rx) = oneshot::channel();
        let msg = SessionMsg::Attach {
            conn: self.shared.clone(),
            role,
            reply,
        };
        if entry.tx.send(msg).is_err() {
            self.fail(ErrorCode::SessionNotFound, format!("session {session} has ended"));
            return false;
        }
        match rx.await {
            Ok(Ok(())) => {
                self.attached = Some(Attached { session, tx: entry.tx });
                true
            }
            Ok(Err(body)) => {
                self.reply(body);
                false
            }
            Err(_) => {
                self.fail(ErrorCode::SessionNotFound, format!("session {session} has ended"));
                false
            }
        }
    }

    async fn on_lobby(&mut self, msg: WireMessage) {
        match msg.body {
            Body::Hello(h) => self.reply(self.hub.hello(&h)),
            Body::Auth(a) => match self.hub.authenticate(&a) {
                Ok((player, body)) => {
                    self.player = Some(player);
                    self.reply(body);
                }
                Err(body) => self.reply(body),
            },
            Body::JoinOperator(Join::Request { session, task, seed }) => {
                let Some(player) = self.player.clone() else {
                    return self.fail(ErrorCode::Unauthorized, "authenticate first");
                };
                let id = match (session, task) {
                    (Some(id), _) => id,
                    (None, Some(task)) => match spawn_session(&self.hub, player, &task, seed.unwrap_or_else(rand::random)) {
                        Ok(id) => id,
                        Err(body) => return self.reply(body),
                    },
                    (None, None) => return self.fail(ErrorCode::Malformed, "join_operator needs a task or a session"),
                };
                self.attach(id, Role::Operator).await;
            }
            Body::JoinSpectator(Join::Request { session: Some(id), .. }) => {
                self.attach(id, Role::Spectator).await;
            }
            Body::JoinSpectator(Join::Request { session: None, .. }) => {
                self.fail(ErrorCode::Malformed, "join_spectator needs a session")
            }
            Body::LeaderboardUpdate(Leaderboard::Request { top }) => self.reply(self.hub.leaderboard(top)),
            other => self.fail(
                ErrorCode::Unexpected,
                format!("{} is not accepted in the lobby", other.type_name()),
            ),
        }
    }

    async fn on_message(&mut self, msg: WireMessage) {
        match &self.attached {
            Some(a) => {
                let session = a.session;
                if a.tx.send(SessionMsg::Inbound { conn: self.shared.id, msg }).is_err() {
                    self.fail(ErrorCode::SessionNotFound, format!("session {session} has ended"));
                    self.shared.close();
                }
            }
            None => self.on_lobby(msg).await,
        }
    }

    /// Attaches straight from a `/session/…` URL; failures close the socket.
    async fn attach_by_url(&mut self, id: Option<SessionId>, role: Option<Role>, token: Option<String>) {
        let Some(player) = token.as_deref().and_then(|t| self.hub.signer.verify(t)) else {
            self.fail(ErrorCode::Unauthorized, "missing or invalid token");
            return self.shared.close();
        };
        self.player = Some(player);
        let Some(id) = id else {
            self.fail(ErrorCode::SessionNotFound, "malformed session id");
            return self.shared.close();
        };
        if !self.attach(id, role.unwrap_or(Role::Spectator)).await {
            self.shared.close();
        }
    }

    fn detach(&mut self) {
        if let Some(a) = self.attached.take() {
            let _ = a.tx.send(SessionMsg::Detach { conn: self.shared.id });
        }
    }
}

/// Runs one accepted TCP connection to completion.
pub(crate) async fn serve_connection(hub: Arc<Hub>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let mut route = None;
    let callback = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        route = parse_route(req.uri().path(), req.uri().query());
        if route.is_some() {
            Ok(resp)
        } else {
            let mut r = ErrorResponse::new(Some("unknown path".into()));
            *r.status_mut() = StatusCode::NOT_FOUND;
            Err(r)
        }
    };
    let ws = match tokio_tungstenite::accept_hdr_async(stream, callback).await {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("handshake failed: {e}");
            return;
        }
    };
    let Some(route) = route else { return };
    let (sink, mut stream) = ws.split();
    let shared = ConnShared::new(hub.next_conn_id(), hub.config.server.event_queue_cap);
    let mut writer = tokio::spawn(write_loop(shared.clone(), sink, hub.config.latency.model()));
    let mut conn = Conn {
        hub,
        shared: shared.clone(),
        player: None,
        attached: None,
    };
    if let Route::Session { id, role, token } = route {
        conn.attach_by_url(id, role, token).await;
    }
    let mut writer_done = false;
    while !shared.is_closing() {
        let item = tokio::select! {
            item = stream.next() => item,
            _ = &mut writer => { writer_done = true; break; }
        };
        let frame = match item {
            Some(Ok(Message::Text(t))) => Frame::Text(t.as_str().to_owned()),
            Some(Ok(Message::Binary(b))) => Frame::Binary(b.to_vec()),
            Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
            Some(Ok(_)) => continue,
        };
        match decode(&frame) {
            Ok(msg) => conn.on_message(msg).await,
            Err(e) => conn.reply(e.reply()),
        }
    }
    conn.detach();
    shared.close();
    if !writer_done {
        let _ = writer.await;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes() {
        assert!(matches!(parse_route("/lobby", None), Some(Route::Lobby)));
        assert!(parse_route("/elsewhere", None).is_none());
        let id = SessionId([7; 16]);
        let path = format!("/session/{}", id.to_hex());
        match parse_route(&path, Some("role=spectator&token=abc.def")) {
            Some(Route::Session { id: Some(got), role, token }) => {
                assert_eq!(got, id);
                assert_eq!(role, Some(Role::Spectator));
                assert_eq!(token.as_deref(), Some("abc.def"));
            }
            _ => panic!("session route"),
        }
        assert!(matches!(
            parse_route("/session/zz", None),
            Some(Route::Session { id: None, .. })
        ));
    }
}
