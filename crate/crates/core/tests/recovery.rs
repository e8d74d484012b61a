mod common;

use common::{base, count_events, push, run};
use serde_json::json;

fn desynced(amount: u64) -> caiba::scenario::RunResult {
    let mut cfg = base();
    push(&mut cfg, "faults", json!({"type": "desync_burst", "at_frame": 100, "node": "rx", "can_id": 256, "amount": amount}));
    run(&cfg)
}

#[test]
fn five_failures_trigger_reset_and_next_frame_accepts() {
    let r = desynced(40);
    let rx = r.node_names.iter().position(|n| n == "rx").unwrap();
    let seq: Vec<(bool, Option<u64>)> = r
        .verdicts
        .iter()
        .filter(|v| v.0 == rx && v.1 == 0x100)
        .map(|v| (v.2, v.3))
        .collect();
    let first_fail = seq.iter().position(|v| !v.0).expect("desync causes failures");
    let fails = seq[first_fail..].iter().take_while(|v| !v.0).count();
    assert_eq!(fails, 5, "reset after exactly five consecutive failures");
    assert!(seq[first_fail + 5..].iter().all(|v| v.0), "every frame after the reset accepts");
    assert!(seq.len() > first_fail + 5);

    assert_eq!(r.metrics.reset_requests, 1);
    assert_eq!(count_events(&r, "reset_requested"), 1);
    assert_eq!(count_events(&r, "recovery_started"), 1);
    assert_eq!(count_events(&r, "announcement_accepted"), 1);
    assert_eq!(count_events(&r, "recovery_applied"), 2);
    assert_eq!(r.metrics.nonce_reuse_violations, 0);
    assert_eq!(r.metrics.frames_rejected, 5);

    // The first data counter after the reset is above every counter used before.
    let before_max = r.frames.iter().filter(|f| f.can_id == 0x100).filter_map(|f| f.counter).filter(|&c| c < 1 << 32).max().unwrap();
    let after: Vec<u64> = seq[first_fail + 5..].iter().filter_map(|v| v.1).collect();
    assert!(after[0] > before_max);
    assert!(after.windows(2).all(|w| w[1] == w[0] + 1));
}

#[test]
fn small_rollback_is_absorbed_by_reconstruction() {
    // A rollback smaller than the 16-value window still reconstructs.
    let r = desynced(10);
    assert_eq!(r.metrics.frames_accepted, 120);
    assert_eq!(r.metrics.reset_requests, 0);
}

#[test]
fn other_receivers_follow_the_reset() {
    let r = desynced(40);
    let rx2 = r.node_names.iter().position(|n| n == "rx2").unwrap();
    assert!(r.verdicts.iter().filter(|v| v.0 == rx2).all(|v| v.2));
}
