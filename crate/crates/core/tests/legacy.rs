mod common;

use caiba::bus::WireLevel;
use caiba::scenario::{trace_segment, RunOptions, RunResult};
use common::run_opts;
use serde_json::{json, Value};

const LEGACY: [u16; 2] = [0x200, 0x7a5];

fn mixed(with_authenticator: bool) -> Value {
    let mut nodes = vec![
        json!({"name": "tx", "role": "transmitter", "position_m": 0, "ids": ["0x100"]}),
        json!({"name": "old", "role": "legacy", "position_m": 4, "ids": ["0x200", "0x7a5"]}),
        json!({"name": "rx", "role": "receiver", "position_m": 8, "ids": ["0x100"], "plain_ids": ["0x200", "0x7a5"]}),
        json!({"name": "gw", "role": "receiver", "position_m": 19, "plain_ids": ["0x7a5"]}),
    ];
    if with_authenticator {
        nodes.insert(2, json!({"name": "auth", "role": "authenticator", "position_m": 12}));
    }
    json!({
        "name": "mixed",
        "bitrate_bps": 250000,
        "seed": 8,
        "bus": {"length_m": 20},
        "nodes": nodes,
        "traffic": [
            {"can_id": "0x100", "count": 30, "period_bits": 2400},
            {"can_id": "0x200", "count": 30, "period_bits": 2400, "offset_bits": 1200},
            {"can_id": "0x7a5", "count": 30, "period_bits": 2400, "offset_bits": 1800, "dlc": 3}
        ]
    })
}

fn legacy_segments(r: &RunResult) -> Vec<(u16, Vec<(WireLevel, String)>)> {
    let trace = r.trace.as_ref().unwrap();
    r.frames
        .iter()
        .filter(|f| LEGACY.contains(&f.can_id))
        .map(|f| {
            let (from, to) = (f.start_quantum.unwrap(), f.end_quantum.unwrap());
            (f.can_id, trace_segment(trace, &r.node_names, from, to))
        })
        .collect()
}

#[test]
fn legacy_frames_are_bit_identical_without_the_authenticator() {
    let opts = RunOptions {
        trace_position_m: Some(8.0),
        ..Default::default()
    };
    let with = run_opts(&mixed(true), &opts);
    let without = run_opts(&mixed(false), &opts);

    // The secured ID really depends on the authenticator.
    assert_eq!(with.metrics.frames_accepted, 90);
    assert!(without.frames.iter().filter(|f| f.can_id == 0x100).all(|f| !f.accepted()));

    let a = legacy_segments(&with);
    let b = legacy_segments(&without);
    assert_eq!(a.len(), 60);
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        assert_eq!(x.0, y.0);
        assert!(x.1.len() > 100);
        let diff = x.1.iter().zip(&y.1).position(|(p, q)| p != q);
        assert!(x.1.len() == y.1.len() && diff.is_none(), "legacy frame {i} ({:#05x}) differs at {diff:?}", x.0);
        assert!(x.1.iter().all(|(_, d)| !d.contains("auth")));
    }
    let legacy_ok = |r: &RunResult| r.frames.iter().filter(|f| LEGACY.contains(&f.can_id)).all(|f| f.accepted());
    assert!(legacy_ok(&with) && legacy_ok(&without));
}
