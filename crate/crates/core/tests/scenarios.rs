mod common;

use caiba::scenario::{write_outputs, FrameOutcome, RunOptions, Scenario, ScenarioConfig};
use common::{base, count_events, push, run, run_opts};
use serde_json::json;

#[test]
fn honest_traffic_is_accepted() {
    let r = run(&base());
    let m = &r.metrics;
    assert_eq!(m.frames_sent, 120);
    assert_eq!(m.frames_accepted, 120);
    assert_eq!(m.error_frames, 0);
    assert_eq!(m.nonce_reuse_violations, 0);
    assert_eq!(m.reliability, 1.0);
    assert_eq!(m.frames_sent, m.frames_accepted + m.frames_rejected + m.frames_aborted);
    assert!(m.authenticator_flips.to_dominant > 0 && m.authenticator_flips.to_erase > 0);
    assert!(r.frames.iter().all(|f| f.attempts == 1 && f.failed_attempts == 0));
}

#[test]
fn counters_run_per_id_from_zero() {
    let r = run(&base());
    for id in [0x100, 0x101] {
        let counters: Vec<_> = r.frames.iter().filter(|f| f.can_id == id).map(|f| f.counter.unwrap()).collect();
        assert_eq!(counters, (0..60).collect::<Vec<_>>());
    }
}

#[test]
fn missing_authenticator_rejects_every_secured_frame() {
    let mut cfg = base();
    push(&mut cfg, "faults", json!({"type": "disconnect_authenticator", "at_frame": 0}));
    let r = run(&cfg);
    assert_eq!(r.metrics.frames_rejected, 120);
    assert_eq!(r.metrics.frames_accepted, 0);
    // Every attempt ends in an error frame: the first try plus the retransmissions.
    assert_eq!(r.metrics.error_frames, 120 * 4);
    assert!(r.frames.iter().all(|f| f.failed_attempts == 4));
    assert_eq!(r.metrics.fallback_events, 1);
}

#[test]
fn disconnect_without_backup_loses_later_frames() {
    let mut cfg = base();
    push(&mut cfg, "faults", json!({"type": "disconnect_authenticator", "at_frame": 40}));
    let r = run(&cfg);
    assert!(r.frames[..40].iter().all(|f| f.accepted()));
    assert!(r.frames[40..].iter().all(|f| f.outcome == Some(FrameOutcome::Rejected)));
    assert_eq!(r.metrics.handover_events, 0);
}

#[test]
fn backup_authenticator_takes_over() {
    let mut cfg = base();
    push(&mut cfg, "nodes", json!({"name": "bk", "role": "authenticator", "position_m": 18, "backup": true}));
    push(&mut cfg, "faults", json!({"type": "disconnect_authenticator", "at_frame": 40, "node": "auth"}));
    let r = run(&cfg);
    assert_eq!(r.metrics.honest_frames_accepted, 120);
    assert_eq!(r.metrics.handover_events, 1);
    assert_eq!(count_events(&r, "handover"), 1);
    assert_eq!(r.metrics.fallback_events, 0);
    assert_eq!(r.metrics.nonce_reuse_violations, 0);
}

#[test]
fn jam_is_survived_by_retransmission() {
    let mut cfg = base();
    push(&mut cfg, "nodes", json!({"name": "j", "role": "attacker", "position_m": 7,
        "capabilities": {"can_jam": true}, "attack": {"kind": "jam"}}));
    push(&mut cfg, "faults", json!({"type": "jam", "at_frame": 10, "node": "j"}));
    let r = run(&cfg);
    assert_eq!(r.metrics.frames_accepted, 120);
    assert!(r.metrics.error_frames >= 1);
    assert_eq!(count_events(&r, "jam_armed"), 1);
    assert!(r.frames.iter().any(|f| f.failed_attempts > 0));
}

#[test]
fn legacy_plain_frames_pass_untouched() {
    let mut cfg = base();
    push(&mut cfg, "nodes", json!({"name": "old", "role": "legacy", "position_m": 12, "ids": ["0x200"]}));
    cfg["nodes"][2]["plain_ids"] = json!(["0x200"]);
    push(&mut cfg, "traffic", json!({"can_id": "0x200", "count": 30, "period_bits": 1500, "offset_bits": 500}));
    let r = run(&cfg);
    assert_eq!(r.metrics.frames_accepted, 150);
    let plain: Vec<_> = r.frames.iter().filter(|f| f.can_id == 0x200).collect();
    assert_eq!(plain.len(), 30);
    assert!(plain.iter().all(|f| f.counter.is_none()));
}

#[test]
fn identical_inputs_give_identical_files() {
    let cfg = base();
    let opts = RunOptions {
        trace_position_m: Some(5.0),
        ..Default::default()
    };
    let root = std::env::temp_dir().join(format!("caiba-det-{}", std::process::id()));
    for k in 0..2 {
        write_outputs(&run_opts(&cfg, &opts), &root.join(k.to_string())).unwrap();
    }
    for name in ["metrics.json", "verdicts.csv", "wire_trace.csv"] {
        let a = std::fs::read(root.join("0").join(name)).unwrap();
        let b = std::fs::read(root.join("1").join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name}");
    }
    std::fs::remove_dir_all(root).unwrap();
}

#[test]
fn seed_changes_random_payloads() {
    let a = run(&base());
    let mut cfg = base();
    cfg["seed"] = json!(6);
    let b = run(&cfg);
    assert_eq!(b.metrics.frames_accepted, 120);
    assert_ne!(a.metrics.stuff_bits_total, b.metrics.stuff_bits_total);
}

#[test]
fn reduced_tag_width_still_authenticates() {
    for w in [8, 16] {
        let mut cfg = base();
        cfg["tag_width"] = json!(w);
        assert_eq!(run(&cfg).metrics.frames_accepted, 120, "width {w}");
    }
}

fn config_error(edit: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut cfg = base();
    edit(&mut cfg);
    let err = match ScenarioConfig::from_json(&cfg.to_string()) {
        Ok(c) => Scenario::new(c).err().unwrap_or_else(|| panic!("accepted: {cfg}")),
        Err(e) => e,
    };
    err.path
}

#[test]
fn config_errors_carry_field_paths() {
    assert_eq!(config_error(|c| c["nodes"][1]["role"] = json!("sender")), "nodes[1].role");
    assert_eq!(config_error(|c| c["traffic"][0]["can_id"] = json!("0x999")), "traffic[0].can_id");
    assert_eq!(config_error(|c| c["traffic"][1]["can_id"] = json!("0x555")), "traffic[1].can_id");
    assert_eq!(config_error(|c| c["nodes"][3]["position_m"] = json!(25)), "nodes[3].position_m");
    assert_eq!(config_error(|c| c["nodes"][1]["ids"] = json!(["0x100"])), "nodes[1].ids[0]");
    assert_eq!(config_error(|c| c["nodes"][1]["ids"] = json!(["0x012"])), "nodes[1].ids[0]");
    assert_eq!(config_error(|c| c["tag_width"] = json!(12)), "tag_width");
    assert_eq!(config_error(|c| c["bus"]["colour"] = json!("red")), "bus.colour");
    assert_eq!(
        config_error(|c| c["faults"] = json!([{"type": "desync_burst", "at_frame": 3, "node": "auth", "can_id": 256}])),
        "faults[0].node"
    );
    assert_eq!(
        config_error(|c| c["nodes"][2]["keys"] = json!({"source": {"0x100": {"k1": "00000000000000000000000000000001", "k2": "00000000000000000000000000000002"}}})),
        "nodes[2].keys.source.0x100"
    );
}

#[test]
fn too_many_receivers_rejected() {
    let path = config_error(|c| {
        for i in 0..15 {
            push(c, "nodes", json!({"name": format!("r{i}"), "role": "receiver", "position_m": 1, "ids": [256]}));
        }
    });
    assert_eq!(path, "nodes");
}
