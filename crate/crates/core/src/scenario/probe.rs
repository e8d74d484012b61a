//! Offline decoding of a recorded wire trace, as an ideal listen-only node at
//! the trace position would sample it.

use crate::bits::BitString;
use crate::bus::{BitClock, BitTimingConfig, WireLevel, WireTrace};
use crate::frame::{Destuffer, CRC_BITS, DLC_BITS, HEADER_BITS, MAX_DLC};

/// Recessive samples that end a frame, an error frame or the intermission.
const IDLE_BITS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbedBit {
    /// Quantum at which the bit was sampled.
    pub sample_quantum: u64,
    pub level: WireLevel,
    /// Level at the end of the bit's second quantum.
    pub early: Option<WireLevel>,
}

/// One frame, SOF through CRC, as sampled at the probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbedFrame {
    pub start_quantum: u64,
    /// Sampled bits including stuff bits.
    pub raw: Vec<ProbedBit>,
    pub destuffed: BitString,
    /// Indices into `raw` of the stuff bits.
    pub stuff_indices: Vec<usize>,
    /// For each destuffed bit, its index in `raw`.
    pub raw_index: Vec<usize>,
    /// The stuffed region decoded through the CRC without a stuff violation.
    pub complete: bool,
}

impl ProbedFrame {
    pub fn can_id(&self) -> Option<u16> {
        (self.destuffed.len() >= 12).then(|| self.destuffed.uint(1..12) as u16)
    }

    pub fn dlc(&self) -> Option<u8> {
        (self.destuffed.len() >= HEADER_BITS).then(|| self.destuffed.uint(HEADER_BITS - DLC_BITS..HEADER_BITS) as u8)
    }

    /// Data field bits.
    pub fn payload(&self) -> Option<BitString> {
        let len = 8 * usize::from(self.dlc()?.min(MAX_DLC));
        (self.complete).then(|| self.destuffed.slice(HEADER_BITS..HEADER_BITS + len))
    }
}

enum State {
    Idle,
    Frame,
    Trailer,
}

/// Splits a trace into frames and samples every bit with a regular bit clock.
pub fn probe_frames(trace: &WireTrace, timing: &BitTimingConfig) -> Vec<ProbedFrame> {
    let mut clock = BitClock::new(*timing);
    let mut state = State::Idle;
    let mut frames = Vec::new();
    let mut cur: Option<ProbedFrame> = None;
    let mut destuffer = Destuffer::new();
    let mut early = None;
    let mut recessive_run = 0usize;
    let start = trace.runs.first().map_or(0, |r| r.start_quantum);
    for q in start..trace.end_quantum() {
        let Some((level, _)) = trace.at(q) else { continue };
        let tick = clock.on_quantum(level, true);
        if tick.hard_synced {
            state = State::Frame;
            destuffer = Destuffer::new();
            cur = Some(ProbedFrame {
                start_quantum: q,
                raw: Vec::new(),
                destuffed: BitString::new(),
                stuff_indices: Vec::new(),
                raw_index: Vec::new(),
                complete: false,
            });
        }
        if tick.early.is_some() {
            early = tick.early;
        }
        let Some(sampled) = tick.sampled else { continue };
        let bit_early = early.take();
        match state {
            State::Idle => {}
            State::Frame => {
                let f = cur.as_mut().expect("frame in progress");
                let raw_i = f.raw.len();
                f.raw.push(ProbedBit {
                    sample_quantum: q,
                    level: sampled,
                    early: bit_early,
                });
                match destuffer.push(sampled.bit()) {
                    Ok(Some(b)) => {
                        f.destuffed.push(b);
                        f.raw_index.push(raw_i);
                    }
                    Ok(None) => f.stuff_indices.push(raw_i),
                    Err(()) => {
                        frames.push(cur.take().expect("frame in progress"));
                        state = State::Trailer;
                        recessive_run = 0;
                        continue;
                    }
                }
                let f = cur.as_mut().expect("frame in progress");
                if let Some(dlc) = f.dlc() {
                    let need = HEADER_BITS + 8 * usize::from(dlc.min(MAX_DLC)) + CRC_BITS;
                    // A run ending the CRC is still followed by its stuff bit.
                    if f.destuffed.len() == need && !destuffer.expects_stuff() {
                        f.complete = true;
                        frames.push(cur.take().expect("frame in progress"));
                        state = State::Trailer;
                        recessive_run = 0;
                    }
                }
            }
            State::Trailer => {
                if sampled == WireLevel::Recessive {
                    recessive_run += 1;
                    if recessive_run >= IDLE_BITS {
                        state = State::Idle;
                        clock.arm_hard_sync(true);
                    }
                } else {
                    recessive_run = 0;
                }
            }
        }
    }
    frames.extend(cur);
    frames
}
