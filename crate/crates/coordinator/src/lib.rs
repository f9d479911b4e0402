//! Coordinator for collaborative training sessions.
//!
//! [`session::Coordinator`] is a pure state machine over framed messages and a
//! millisecond clock. With the `server` feature, [`server`] runs it behind a
//! framed TCP listener for nodes and an HTTP/websocket API for operators, and
//! [`store`] journals its events to disk so sessions survive restarts.

pub mod events;
pub mod session;
pub mod snapshot;
#[cfg(feature = "server")]
pub mod config;
#[cfg(feature = "server")]
pub mod server;
pub mod store;

pub use events::{SessionEvent, TimedEvent};
pub use session::{ConnId, Coordinator, CoordinatorError, Liveness, Outbound};
pub use snapshot::{Phase, SessionSnapshot, TaskSummary};
