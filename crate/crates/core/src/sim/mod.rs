//! Scenario-driven simulation: loading, the event loop, traces and the
//! property checks run over them.

pub mod check;
pub mod run;
pub mod scenario;
pub mod trace;

pub use check::{check, CheckReport, PropertyResult};
pub use run::{run, Invariant, RunOutcome, RunStats, Simulation, Violation};
pub use scenario::{load_scenario, Scenario, ScenarioError};
pub use trace::{canonicalize_handles, Actor, Trace, TraceEvent};
