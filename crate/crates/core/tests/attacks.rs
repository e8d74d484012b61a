mod common;

use caiba::attack::forgery_monte_carlo;
use caiba::scenario::FrameOutcome;
use caiba::secoc::TagWidth;
use common::{base, push, run};
use serde_json::{json, Value};

fn with_attacker(attacker: Value, traffic: Option<Value>) -> Value {
    let mut cfg = base();
    push(&mut cfg, "nodes", attacker);
    if let Some(t) = traffic {
        push(&mut cfg, "traffic", t);
    }
    cfg
}

fn forgery_traffic(count: u64) -> Value {
    json!({"can_id": 256, "sender": "m", "count": count, "period_bits": 1000, "offset_bits": 500})
}

fn masquerader(guess: &str) -> Value {
    json!({"name": "m", "role": "attacker", "position_m": 7,
           "capabilities": {"knows_group_key": true},
           "attack": {"kind": "masquerade", "target_id": 256, "guess": guess}})
}

#[test]
fn masquerade_without_source_key_fails() {
    let r = run(&with_attacker(masquerader("random"), Some(forgery_traffic(50))));
    assert_eq!(r.metrics.forgeries_attempted, 50);
    assert_eq!(r.metrics.forgeries_accepted, 0);
    assert_eq!(r.metrics.honest_frames_accepted, 120);
}

#[test]
fn masquerade_succeeds_once_the_authenticator_is_gone() {
    let mut cfg = with_attacker(masquerader("zero"), Some(forgery_traffic(50)));
    cfg["traffic"].as_array_mut().unwrap().remove(0);
    push(&mut cfg, "faults", json!({"type": "disconnect_authenticator", "at_frame": 0}));
    let r = run(&cfg);
    assert_eq!(r.metrics.forgeries_accepted, 50);
}

#[test]
fn masquerade_at_narrow_tags_matches_guessing_odds() {
    let mut cfg = with_attacker(masquerader("random"), None);
    cfg["traffic"] = json!([forgery_traffic(1500)]);
    cfg["tag_width"] = json!(8);
    let r = run(&cfg);
    let n = r.metrics.forgeries_attempted as f64;
    let p = 1.0 / 256.0;
    let sigma = (n * p * (1.0 - p)).sqrt();
    let s = r.metrics.forgeries_accepted as f64;
    assert!((s - n * p).abs() <= 3.0 * sigma, "{s} successes of {n}");
}

#[test]
fn replay_is_rejected() {
    for lag in [0, 16] {
        let m = json!({"name": "m", "role": "attacker", "position_m": 7,
                       "attack": {"kind": "replay", "target_id": 256, "lag": lag}});
        let r = run(&with_attacker(m, Some(forgery_traffic(50))));
        assert_eq!(r.metrics.forgeries_accepted, 0, "lag {lag}");
        assert_eq!(r.metrics.honest_frames_accepted, 120, "lag {lag}");
    }
}

#[test]
fn replay_before_history_exists_aborts() {
    let m = json!({"name": "m", "role": "attacker", "position_m": 7,
                   "attack": {"kind": "replay", "target_id": 256, "lag": 16}});
    let r = run(&with_attacker(m, Some(forgery_traffic(50))));
    let attacks: Vec<_> = r.frames.iter().filter(|f| f.attack).collect();
    assert!(attacks[..16].iter().all(|f| f.outcome == Some(FrameOutcome::Aborted)));
    assert!(attacks[16..].iter().all(|f| f.outcome == Some(FrameOutcome::Rejected)));
}

#[test]
fn modified_data_bits_never_accepted() {
    let m = json!({"name": "m", "role": "attacker", "position_m": 7,
                   "capabilities": {"can_overwrite_bits": true},
                   "attack": {"kind": "bit_modify", "target_id": 256, "flip_indices": [25]}});
    let r = run(&with_attacker(m, None));
    for f in &r.frames {
        if f.can_id == 0x100 {
            assert_eq!(f.outcome, Some(FrameOutcome::Rejected));
        } else {
            assert!(f.accepted(), "untargeted ID unaffected");
        }
    }
}

#[test]
fn compromised_authenticator_cannot_forge_integrity_tags() {
    let mut cfg = base();
    cfg["nodes"][4] = json!({"name": "m", "role": "attacker", "position_m": 7,
        "capabilities": {"is_authenticator": true},
        "attack": {"kind": "compromised_authenticator", "target_id": 256}});
    cfg["traffic"] = json!([{"can_id": 256, "sender": "m", "count": 200, "period_bits": 300}]);
    let r = run(&cfg);
    assert_eq!(r.metrics.forgeries_attempted, 200);
    assert_eq!(r.metrics.forgeries_accepted, 0);
}

#[test]
fn capability_mismatch_is_a_config_error() {
    let m = json!({"name": "m", "role": "attacker", "position_m": 7,
                   "capabilities": {"knows_group_key": true, "is_authenticator": true},
                   "attack": {"kind": "masquerade", "target_id": 256, "guess": "zero"}});
    let cfg = with_attacker(m, None);
    let err = caiba::scenario::ScenarioConfig::from_json(&cfg.to_string())
        .and_then(caiba::scenario::Scenario::new)
        .err()
        .unwrap();
    assert_eq!(err.path, "nodes[5].capabilities");
}

#[test]
fn forgery_game_rates() {
    let r = forgery_monte_carlo(TagWidth::new(8).unwrap(), 20_000, 11);
    assert!(r.within_band, "{r:?}");
    let r = forgery_monte_carlo(TagWidth::new(24).unwrap(), 10_000, 11);
    assert!(r.successes <= 1);
    assert_eq!(r.expected_rate, 2f64.powi(-24));
}
