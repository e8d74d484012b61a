//! Run measurements and their file formats.

use std::io;
use std::path::Path;

use serde::Serialize;

use crate::bus::{WireLevel, WireTrace};

use super::config::ScenarioConfig;
use super::runner::RunResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOutcome {
    Accepted,
    Rejected,
    /// Never completed an attempt on the bus.
    Aborted,
}

/// One logical frame released by the traffic generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrameRecord {
    pub handle: u64,
    pub can_id: u16,
    pub sender: String,
    pub attack: bool,
    pub released_quantum: u64,
    /// Start of the last attempt.
    pub start_quantum: Option<u64>,
    pub end_quantum: Option<u64>,
    pub attempts: u32,
    pub failed_attempts: u32,
    pub counter: Option<u64>,
    pub stuff_bits: usize,
    pub outcome: Option<FrameOutcome>,
}

impl FrameRecord {
    pub fn new(handle: u64, can_id: u16, sender: String, attack: bool, released_quantum: u64) -> Self {
        Self {
            handle,
            can_id,
            sender,
            attack,
            released_quantum,
            start_quantum: None,
            end_quantum: None,
            attempts: 0,
            failed_attempts: 0,
            counter: None,
            stuff_bits: 0,
            outcome: None,
        }
    }

    pub fn accepted(&self) -> bool {
        self.outcome == Some(FrameOutcome::Accepted)
    }
}

/// Notable scenario-level occurrence (fault, recovery step, handover).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioEvent {
    pub quantum: u64,
    pub node: String,
    pub kind: String,
    pub detail: String,
}

impl ScenarioEvent {
    pub fn new(quantum: u64, node: &str, kind: &str, detail: String) -> Self {
        Self {
            quantum,
            node: node.into(),
            kind: kind.into(),
            detail,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlipCounts {
    pub to_dominant: u64,
    pub to_erase: u64,
    pub compensations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub seed: u64,
    pub tag_width: u8,
    pub bitrate_bps: u32,
    pub quanta_per_bit: u16,
    pub quanta_simulated: u64,
    pub frames_sent: u64,
    pub frames_accepted: u64,
    pub frames_rejected: u64,
    pub frames_aborted: u64,
    pub honest_frames_sent: u64,
    pub honest_frames_accepted: u64,
    /// Accepted over sent, honest frames only.
    pub reliability: f64,
    pub error_frames: u64,
    pub stuff_bits_total: u64,
    pub authenticator_flips: FlipCounts,
    pub reset_requests: u64,
    pub recovery_events: u64,
    pub handover_events: u64,
    pub fallback_events: u64,
    pub forgeries_attempted: u64,
    pub forgeries_accepted: u64,
    pub multi_erase_quanta: u64,
    pub illegal_erase_quanta: u64,
    pub nonce_reuse_violations: u64,
}

impl RunMetrics {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        Self {
            scenario: cfg.name.clone(),
            seed: cfg.seed,
            tag_width: cfg.tag_width.bits(),
            bitrate_bps: cfg.bitrate_bps,
            quanta_per_bit: cfg.quanta_per_bit,
            quanta_simulated: 0,
            frames_sent: 0,
            frames_accepted: 0,
            frames_rejected: 0,
            frames_aborted: 0,
            honest_frames_sent: 0,
            honest_frames_accepted: 0,
            reliability: 0.0,
            error_frames: 0,
            stuff_bits_total: 0,
            authenticator_flips: FlipCounts::default(),
            reset_requests: 0,
            recovery_events: 0,
            handover_events: 0,
            fallback_events: 0,
            forgeries_attempted: 0,
            forgeries_accepted: 0,
            multi_erase_quanta: 0,
            illegal_erase_quanta: 0,
            nonce_reuse_violations: 0,
        }
    }

    pub(crate) fn tally(&mut self, frames: &[FrameRecord]) {
        for f in frames {
            self.frames_sent += 1;
            match f.outcome {
                Some(FrameOutcome::Accepted) => self.frames_accepted += 1,
                Some(FrameOutcome::Rejected) => self.frames_rejected += 1,
                Some(FrameOutcome::Aborted) | None => self.frames_aborted += 1,
            }
            if f.attack {
                self.forgeries_attempted += 1;
                self.forgeries_accepted += u64::from(f.accepted());
            } else {
                self.honest_frames_sent += 1;
                self.honest_frames_accepted += u64::from(f.accepted());
            }
        }
        self.reliability = if self.honest_frames_sent == 0 {
            1.0
        } else {
            self.honest_frames_accepted as f64 / self.honest_frames_sent as f64
        };
    }
}

fn level_char(level: WireLevel) -> &'static str {
    match level {
        WireLevel::Dominant => "D",
        WireLevel::Recessive => "R",
    }
}

fn driver_names(mask: u64, names: &[String]) -> String {
    names
        .iter()
        .enumerate()
        .filter(|(i, _)| *i < 64 && mask & (1 << i) != 0)
        .map(|(_, n)| n.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

/// Per-quantum `(level, driving node names)` between two quanta.
pub fn trace_segment(trace: &WireTrace, names: &[String], from: u64, to: u64) -> Vec<(WireLevel, String)> {
    (from..to)
        .filter_map(|q| trace.at(q).map(|(l, m)| (l, driver_names(m, names))))
        .collect()
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

/// Writes `metrics.json`, `verdicts.csv` and, when traced, `wire_trace.csv`.
pub fn write_outputs(result: &RunResult, out_dir: &Path) -> io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut json = serde_json::to_string_pretty(&result.metrics).map_err(io::Error::other)?;
    json.push('\n');
    std::fs::write(out_dir.join("metrics.json"), json)?;

    let mut w = csv::Writer::from_path(out_dir.join("verdicts.csv")).map_err(csv_err)?;
    w.write_record([
        "handle",
        "can_id",
        "sender",
        "attack",
        "outcome",
        "attempts",
        "failed_attempts",
        "counter",
        "start_quantum",
        "end_quantum",
    ])
    .map_err(csv_err)?;
    for f in &result.frames {
        let outcome = match f.outcome {
            Some(FrameOutcome::Accepted) => "accepted",
            Some(FrameOutcome::Rejected) => "rejected",
            _ => "aborted",
        };
        let opt = |v: Option<u64>| v.map_or(String::new(), |v| v.to_string());
        w.write_record([
            f.handle.to_string(),
            format!("{:#05x}", f.can_id),
            f.sender.clone(),
            f.attack.to_string(),
            outcome.to_string(),
            f.attempts.to_string(),
            f.failed_attempts.to_string(),
            opt(f.counter),
            opt(f.start_quantum),
            opt(f.end_quantum),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    if let Some(trace) = &result.trace {
        let mut w = csv::Writer::from_path(out_dir.join("wire_trace.csv")).map_err(csv_err)?;
        w.write_record(["quantum", "quanta", "level", "drivers"]).map_err(csv_err)?;
        for r in &trace.runs {
            w.write_record([
                r.start_quantum.to_string(),
                r.quanta.to_string(),
                level_char(r.level).to_string(),
                driver_names(r.drivers, &result.node_names),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(())
}
