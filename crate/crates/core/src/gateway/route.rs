//! Classifies inbound messages by connection role.
//!
//! Only [`route_operator`] can yield a [`Command`]; spectator traffic is
//! routed to [`Common`] actions, none of which touch session state.

use crate::session::{OperatorInput, SessionError, SessionState, SessionSummary};
use crate::task::GameEvent;

use super::wire::{Body, ErrorCode, Hello, Input, Leaderboard, Role, SessionEnd, WireMessage};

/// A message that mutates the session.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Input(OperatorInput),
    Start,
    NextAttempt { reuse_seed: bool },
    End,
}

/// Actions available to every role.
#[derive(Debug, Clone, PartialEq)]
pub enum Common {
    Hello(Hello),
    Leaderboard { top: u32 },
    Reject { code: ErrorCode, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorAction {
    Command(Command),
    Common(Common),
}

fn common(msg: &WireMessage) -> Common {
    match &msg.body {
        Body::Hello(h) => Common::Hello(h.clone()),
        Body::LeaderboardUpdate(Leaderboard::Request { top }) => Common::Leaderboard { top: *top },
        other => Common::Reject {
            code: ErrorCode::Unexpected,
            message: format!("{} is not accepted on a session connection", other.type_name()),
        },
    }
}

pub fn route_operator(msg: &WireMessage) -> OperatorAction {
    let cmd = match &msg.body {
        Body::Input(Input::Joint {
            target_q,
            gripper_closed,
            client_timestamp,
        }) => Command::Input(OperatorInput {
            seq: msg.seq,
            target_q: *target_q,
            gripper_closed: *gripper_closed,
            client_timestamp: *client_timestamp,
        }),
        Body::Input(Input::Start) => Command::Start,
        Body::Input(Input::NextAttempt { reuse_seed }) => Command::NextAttempt {
            reuse_seed: *reuse_seed,
        },
        Body::SessionEnd(SessionEnd::Request) => Command::End,
        _ => return OperatorAction::Common(common(msg)),
    };
    OperatorAction::Command(cmd)
}

pub fn route_spectator(msg: &WireMessage) -> Common {
    match &msg.body {
        Body::Input(_) | Body::SessionEnd(_) => Common::Reject {
            code: ErrorCode::ReadOnly,
            message: "spectators cannot control the session".into(),
        },
        _ => common(msg),
    }
}

/// What applying a command produced.
#[derive(Debug, Default)]
pub struct Applied {
    pub events: Vec<GameEvent>,
    pub summary: Option<SessionSummary>,
}

/// Applies a non-input command. Joint inputs are batched by the caller and
/// passed to [`SessionState::tick`] instead.
pub fn apply_command(session: &mut SessionState, cmd: &Command) -> Result<Applied, SessionError> {
    let mut out = Applied::default();
    match cmd {
        Command::Input(_) => {}
        Command::Start => out.events = session.start()?,
        Command::NextAttempt { reuse_seed } => out.events = session.next_attempt(*reuse_seed)?,
        Command::End => {
            out.events.extend(session.abandon_attempt());
            out.summary = Some(session.end_session());
        }
    }
    Ok(out)
}

/// Routes one inbound message by role and applies it. Joint inputs are
/// appended to `pending` for the next tick; anything that is not a session
/// command comes back as `Err` for the caller to answer.
pub fn handle_inbound(
    session: &mut SessionState,
    role: Role,
    msg: &WireMessage,
    pending: &mut Vec<OperatorInput>,
) -> Result<Applied, Common> {
    let cmd = match role {
        Role::Spectator => return Err(route_spectator(msg)),
        Role::Operator => match route_operator(msg) {
            OperatorAction::Common(c) => return Err(c),
            OperatorAction::Command(cmd) => cmd,
        },
    };
    if let Command::Input(input) = cmd {
        pending.push(input);
        return Ok(Applied::default());
    }
    apply_command(session, &cmd).map_err(|e| Common::Reject {
        code: match e {
            SessionError::WrongPhase { .. } | SessionError::AttemptsExhausted(_) => ErrorCode::WrongPhase,
            _ => ErrorCode::Internal,
        },
        message: e.to_string(),
    })
}
