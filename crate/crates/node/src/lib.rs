//! Training client for collaborative sessions.
//!
//! [`Node`] is the protocol logic as a pure state machine; [`driver`] (with
//! the `net` feature) runs it over TCP. [`run_solo`] trains without a server
//! for baselines, and [`evaluate`] scores a model on held-out data.

pub mod exchange;
pub mod machine;
pub mod solo;
pub mod source;

#[cfg(feature = "net")]
pub mod driver;

pub use exchange::{dial_plan, Exchange, ExchangeFailure, Progress};
pub use machine::{Action, Finish, MetricRecord, Node, NodeReport, NodeSetup, Randomness, TrainJob};
pub use solo::{evaluate, run_solo, write_metrics_csv, SoloOutcome};
pub use source::{DataFormat, DataSource, Shard};
