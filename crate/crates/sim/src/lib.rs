//! Deterministic simulation of collaborative training sessions.
//!
//! The real coordinator and node state machines run against each other over
//! an in-memory network in logical time, with scripted latency and client
//! churn. A run yields an [`ExperimentReport`] that is a pure function of
//! its [`Scenario`].

pub mod report;
pub mod scenario;
pub mod sim;

pub use report::{
    export_report, read_curve_rows, ClientEpoch, ClientRecord, CurveRow, ExperimentReport, ExportError,
    RoundRecord, TimelineEntry, METRICS_CSV, REPORT_JSON, REPORT_VERSION,
};
pub use scenario::{
    blobs, ClientData, DataSpec, Fault, FaultEvent, NetworkConfig, Scenario, ScenarioError, Trigger,
    SCENARIO_VERSION,
};
pub use sim::{run_scenario, Endpoint, Frame, FrameLog, FrameTap, LoggedFrame, NoTap, SimError, Simulation};
