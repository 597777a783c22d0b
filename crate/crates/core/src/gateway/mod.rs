//! Network boundary pieces that do not depend on a transport: the wire
//! protocol, fan-out queues, message routing, tokens, camera hints and a
//! simulated network for latency testing.

pub mod auth;
pub mod camera;
pub mod fanout;
pub mod harness;
pub mod netsim;
pub mod route;
pub mod wire;

pub use camera::CameraHint;
pub use fanout::{AttachError, ConnId, Fanout, FanoutConfig, Outbox, SharedOutbox, TickReport, Waker};
pub use netsim::{LatencyModel, Link};
pub use route::{handle_inbound, route_operator, route_spectator, Applied, Command, Common, OperatorAction};
pub use wire::{decode, encode, Body, Frame, Role, WireError, WireMessage, PROTOCOL_VERSION};
