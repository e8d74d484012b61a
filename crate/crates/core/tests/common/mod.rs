#![allow(dead_code)]

use caiba::scenario::{RunOptions, RunResult, Scenario, ScenarioConfig};
use serde_json::{json, Value};

pub const GROUP_KEY: &str = "000102030405060708090a0b0c0d0e0f";

/// Two secured senders, two receivers, one authenticator in the middle of a 20 m bus.
pub fn base() -> Value {
    json!({
        "name": "base",
        "bitrate_bps": 500000,
        "seed": 5,
        "bus": {"length_m": 20},
        "nodes": [
            {"name": "tx", "role": "transmitter", "ids": ["0x100"],
             "recovery": {"pairwise_id": "0x020", "broadcast_id": "0x030"}},
            {"name": "tx2", "role": "transmitter", "position_m": 3, "ids": ["0x101"]},
            {"name": "rx", "role": "receiver", "position_m": 5, "ids": [256, 257]},
            {"name": "rx2", "role": "receiver", "position_m": 15, "ids": [256]},
            {"name": "auth", "role": "authenticator", "position_m": 10}
        ],
        "traffic": [
            {"can_id": "0x100", "count": 60, "period_bits": 1000},
            {"can_id": "0x101", "count": 60, "period_bits": 1000, "offset_bits": 3}
        ],
        "faults": []
    })
}

pub fn push(cfg: &mut Value, key: &str, item: Value) {
    cfg[key].as_array_mut().expect("array field").push(item);
}

pub fn config(cfg: &Value) -> ScenarioConfig {
    ScenarioConfig::from_json(&cfg.to_string()).expect("valid scenario")
}

pub fn run_opts(cfg: &Value, opts: &RunOptions) -> RunResult {
    Scenario::new(config(cfg)).expect("scenario builds").run(opts).expect("scenario runs")
}

pub fn run(cfg: &Value) -> RunResult {
    run_opts(cfg, &RunOptions::default())
}

pub fn count_events(r: &RunResult, kind: &str) -> usize {
    r.events.iter().filter(|e| e.kind == kind).count()
}
