//! Bit timing: time-quantum segmentation, hard and soft synchronization,
//! and the overwrite timing budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::WireLevel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimingError {
    #[error("quanta_per_bit must be at least 8 (got {0})")]
    TooFewQuanta(u16),
    #[error("segments sum to {sum}, expected {quanta}")]
    SegmentSum { sum: u16, quanta: u16 },
    #[error("sjw must be in 1..=4 and not exceed phase_seg2 (got {0})")]
    Sjw(u16),
    #[error("sample point at {0:.3} of the bit is outside [0.70, 0.80]")]
    SamplePoint(f64),
    #[error("bitrate must be positive")]
    Bitrate,
}

/// Segmentation of one nominal bit time into time quanta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitTimingConfig {
    pub quanta_per_bit: u16,
    pub prop_seg: u16,
    pub phase_seg1: u16,
    pub phase_seg2: u16,
    pub sjw: u16,
    pub quantum_ns: f64,
}

impl BitTimingConfig {
    pub const SYNC_SEG: u16 = 1;

    /// Segments for `quanta_per_bit` with the sample point on the quantum
    /// boundary nearest 75% (ties round later, so 10 quanta sample after 8).
    pub fn for_bitrate(bitrate_bps: u32, quanta_per_bit: u16) -> Result<Self, TimingError> {
        if bitrate_bps == 0 {
            return Err(TimingError::Bitrate);
        }
        if quanta_per_bit < 8 {
            return Err(TimingError::TooFewQuanta(quanta_per_bit));
        }
        let sample = (3 * quanta_per_bit + 2) / 4;
        let phase_seg2 = quanta_per_bit - sample;
        let phase_seg1 = phase_seg2;
        let prop_seg = sample - Self::SYNC_SEG - phase_seg1;
        let cfg = Self {
            quanta_per_bit,
            prop_seg,
            phase_seg1,
            phase_seg2,
            sjw: phase_seg2.min(2),
            quantum_ns: 1e9 / f64::from(bitrate_bps) / f64::from(quanta_per_bit),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TimingError> {
        if self.quanta_per_bit < 8 {
            return Err(TimingError::TooFewQuanta(self.quanta_per_bit));
        }
        let sum = Self::SYNC_SEG + self.prop_seg + self.phase_seg1 + self.phase_seg2;
        if sum != self.quanta_per_bit {
            return Err(TimingError::SegmentSum {
                sum,
                quanta: self.quanta_per_bit,
            });
        }
        if !(1..=4).contains(&self.sjw) || self.sjw > self.phase_seg2 {
            return Err(TimingError::Sjw(self.sjw));
        }
        let frac = self.sample_fraction();
        if !(0.70..=0.80 + 1e-9).contains(&frac) {
            return Err(TimingError::SamplePoint(frac));
        }
        Ok(())
    }

    /// Quanta before the sample point (sync + prop + phase1).
    pub fn sample_point(&self) -> u16 {
        Self::SYNC_SEG + self.prop_seg + self.phase_seg1
    }

    pub fn sample_fraction(&self) -> f64 {
        f64::from(self.sample_point()) / f64::from(self.quanta_per_bit)
    }

    pub fn bit_time_ns(&self) -> f64 {
        self.quantum_ns * f64::from(self.quanta_per_bit)
    }
}

/// Phase adjustment for a recessive-to-dominant edge seen `edge_offset`
/// quanta into the bit. Positive values lengthen phase_seg1, negative values
/// shorten phase_seg2.
pub fn resync(edge_offset: i32, sjw: u16) -> i32 {
    let sjw = i32::from(sjw);
    edge_offset.signum() * edge_offset.abs().min(sjw)
}

/// What happened during one quantum from a node's point of view.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClockTick {
    /// Level at the regular sample point, if this quantum ended at it.
    pub sampled: Option<WireLevel>,
    /// Level at the end of the second quantum of the bit.
    pub early: Option<WireLevel>,
    /// The bit ended with this quantum; the next quantum starts a new bit.
    pub bit_end: bool,
    pub hard_synced: bool,
    /// Phase adjustment applied in this quantum.
    pub resync: i32,
}

/// A node's local bit clock.
#[derive(Debug, Clone)]
pub struct BitClock {
    cfg: BitTimingConfig,
    phase: u16,
    bit_len: u16,
    sample_at: u16,
    prev_level: WireLevel,
    last_sample: WireLevel,
    synced_this_bit: bool,
    hard_sync_armed: bool,
}

impl BitClock {
    pub fn new(cfg: BitTimingConfig) -> Self {
        Self {
            cfg,
            phase: 0,
            bit_len: cfg.quanta_per_bit,
            sample_at: cfg.sample_point() - 1,
            prev_level: WireLevel::Recessive,
            last_sample: WireLevel::Recessive,
            synced_this_bit: false,
            hard_sync_armed: true,
        }
    }

    pub fn config(&self) -> &BitTimingConfig {
        &self.cfg
    }

    /// Index of the quantum about to be observed within the current bit.
    pub fn phase(&self) -> u16 {
        self.phase
    }

    pub fn bit_len(&self) -> u16 {
        self.bit_len
    }

    pub fn sample_index(&self) -> u16 {
        self.sample_at
    }

    pub fn last_sample(&self) -> WireLevel {
        self.last_sample
    }

    /// While armed, the next recessive-to-dominant edge restarts the bit.
    pub fn arm_hard_sync(&mut self, armed: bool) {
        self.hard_sync_armed = armed;
    }

    /// Lengthens the current bit (and its sample point) by `quanta`.
    pub fn lengthen(&mut self, quanta: u16) {
        self.bit_len += quanta;
        self.sample_at += quanta;
        self.synced_this_bit = true;
    }

    fn restart_bit(&mut self) {
        self.phase = 0;
        self.bit_len = self.cfg.quanta_per_bit;
        self.sample_at = self.cfg.sample_point() - 1;
        self.synced_this_bit = false;
    }

    /// Processes the level observed in the current quantum.
    ///
    /// `may_resync` is false while the node itself drives dominant; a node
    /// never synchronizes on its own edge.
    pub fn on_quantum(&mut self, level: WireLevel, may_resync: bool) -> ClockTick {
        let mut tick = ClockTick::default();
        let edge = self.prev_level == WireLevel::Recessive && level == WireLevel::Dominant;
        self.prev_level = level;

        if edge && self.hard_sync_armed {
            self.restart_bit();
            self.synced_this_bit = true;
            self.hard_sync_armed = false;
            tick.hard_synced = true;
        } else if edge && may_resync && !self.synced_this_bit && self.last_sample == WireLevel::Recessive && self.phase > 0 {
            if self.phase <= self.sample_at {
                let adj = resync(i32::from(self.phase), self.cfg.sjw);
                self.bit_len += adj as u16;
                self.sample_at += adj as u16;
                self.synced_this_bit = true;
                tick.resync = adj;
            } else {
                let remaining = self.bit_len - self.phase;
                let adj = resync(-i32::from(remaining), self.cfg.sjw);
                tick.resync = adj;
                if adj.unsigned_abs() as u16 == remaining {
                    // This quantum becomes the sync segment of the next bit.
                    tick.bit_end = true;
                    self.restart_bit();
                    self.synced_this_bit = true;
                    self.phase = 1;
                    return tick;
                }
                self.bit_len -= adj.unsigned_abs() as u16;
                self.synced_this_bit = true;
            }
        }

        if self.phase == self.sample_at {
            tick.sampled = Some(level);
            self.last_sample = level;
        }
        if self.phase == 1 {
            tick.early = Some(level);
        }
        self.phase += 1;
        if self.phase >= self.bit_len {
            tick.bit_end = true;
            self.restart_bit();
        }
        tick
    }
}

/// Worst-case delay before an overwritten bit is stable at a receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingBudget {
    pub bitrate_bps: u32,
    pub bus_length_m: f64,
    pub quantum_ns: f64,
    /// Authenticator halfway along the bus: there and back.
    pub propagation_ns: f64,
    /// Three quanta: idle before the early sample, the overwrite, back-propagation.
    pub quanta_budget_ns: f64,
    pub transceiver_ns: f64,
    pub total_ns: f64,
    pub sample_deadline_ns: f64,
    pub margin_ns: f64,
    pub pass: bool,
}

pub fn worst_case_overwrite_delay(
    bitrate_bps: u32,
    bus_length_m: f64,
    timing: &BitTimingConfig,
    transceiver_delay_ns: f64,
    signal_speed_ns_per_m: f64,
) -> TimingBudget {
    let propagation_ns = (bus_length_m / 2.0) * 2.0 * signal_speed_ns_per_m;
    let quanta_budget_ns = 3.0 * timing.quantum_ns;
    let total_ns = propagation_ns + quanta_budget_ns + transceiver_delay_ns;
    let sample_deadline_ns = timing.sample_fraction() * timing.bit_time_ns();
    TimingBudget {
        bitrate_bps,
        bus_length_m,
        quantum_ns: timing.quantum_ns,
        propagation_ns,
        quanta_budget_ns,
        transceiver_ns: transceiver_delay_ns,
        total_ns,
        sample_deadline_ns,
        margin_ns: sample_deadline_ns - total_ns,
        pass: total_ns <= sample_deadline_ns,
    }
}
