//! Deterministic scenario runs: configuration, simulation and reporting.

mod config;
mod metrics;
mod probe;
mod runner;

pub use config::{
    AttackConfig, BusConfig, ConfigError, Expectations, FaultConfig, FaultType, NodeConfig, NodeKeys, RecoveryIds, Role, ScenarioConfig,
    SourceKeyHex, TrafficConfig,
};
pub use metrics::{trace_segment, write_outputs, FlipCounts, FrameOutcome, FrameRecord, RunMetrics, ScenarioEvent};
pub use probe::{probe_frames, ProbedBit, ProbedFrame};
pub use runner::{KeyStore, RunOptions, RunResult, Scenario, SimNode};
