//! Bit-level CAN protocol engine shared by every node role: frame reception
//! with destuffing and CRC check, transmission with bit monitoring and
//! arbitration, acknowledgement, error frames and retransmission.

use std::ops::Range;

use crate::bits::BitString;
use crate::bus::{BitClock, BitTimingConfig, ClockTick, DriveLevel, WireLevel};
use crate::frame::{crc15, Destuffer, EncodedFrame, FormViolation, CRC_BITS, DLC_BITS, EOF_BITS, HEADER_BITS, MAX_DLC};

const ERROR_FLAG_BITS: u8 = 6;
const ERROR_DELIMITER_BITS: u8 = 8;
const INTERMISSION_BITS: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum ErrorKind {
    Bit,
    Stuff,
    Form(FormViolation),
    Crc,
    Ack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Region,
    CrcDelimiter,
    AckSlot,
    AckDelimiter,
    Eof(u8),
    Done,
}

/// Result of feeding one sampled bit to an [`RxDecoder`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RxStep {
    /// A destuffed bit of the SOF..CRC region.
    Data { index: usize, bit: bool },
    Stuff,
    Trailer,
    /// Sixth EOF bit: receivers accept the frame here.
    Valid,
    /// Seventh EOF bit.
    Done,
    Error(ErrorKind),
}

/// Incremental receive path working on sampled bits.
#[derive(Debug, Clone)]
pub struct RxDecoder {
    destuffer: Destuffer,
    region: BitString,
    region_len: Option<usize>,
    raw: BitString,
    stage: Stage,
    crc_ok: bool,
    acked: bool,
    stuff_positions: Vec<usize>,
}

impl Default for RxDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RxDecoder {
    pub fn new() -> Self {
        Self {
            destuffer: Destuffer::new(),
            region: BitString::with_capacity(HEADER_BITS + 64 + CRC_BITS),
            region_len: None,
            raw: BitString::with_capacity(140),
            stage: Stage::Region,
            crc_ok: false,
            acked: false,
            stuff_positions: Vec::new(),
        }
    }

    pub fn push(&mut self, bit: bool) -> RxStep {
        let raw_index = self.raw.len();
        self.raw.push(bit);
        match self.stage {
            Stage::Region => {
                if raw_index == 0 && bit {
                    return RxStep::Error(ErrorKind::Form(FormViolation::DominantSof));
                }
                match self.destuffer.push(bit) {
                    Err(()) => RxStep::Error(ErrorKind::Stuff),
                    Ok(None) => {
                        self.stuff_positions.push(raw_index);
                        if self.region_len == Some(self.region.len()) {
                            self.stage = Stage::CrcDelimiter;
                        }
                        RxStep::Stuff
                    }
                    Ok(Some(b)) => {
                        self.region.push(b);
                        let index = self.region.len() - 1;
                        if self.region.len() == HEADER_BITS {
                            let dlc = self.region.uint(HEADER_BITS - DLC_BITS..HEADER_BITS) as u8;
                            if dlc > MAX_DLC {
                                return RxStep::Error(ErrorKind::Form(FormViolation::DlcOutOfRange));
                            }
                            self.region_len = Some(HEADER_BITS + usize::from(dlc) * 8 + CRC_BITS);
                        }
                        if let Some(n) = self.region_len {
                            if self.region.len() == n {
                                let received = self.region.uint(n - CRC_BITS..n) as u16;
                                self.crc_ok = crc15(&self.region.slice(0..n - CRC_BITS)) == received;
                                if !self.destuffer.expects_stuff() {
                                    self.stage = Stage::CrcDelimiter;
                                }
                            }
                        }
                        RxStep::Data { index, bit: b }
                    }
                }
            }
            Stage::CrcDelimiter => {
                if !bit {
                    return RxStep::Error(ErrorKind::Form(FormViolation::CrcDelimiter));
                }
                self.stage = Stage::AckSlot;
                RxStep::Trailer
            }
            Stage::AckSlot => {
                self.acked = !bit;
                self.stage = Stage::AckDelimiter;
                RxStep::Trailer
            }
            Stage::AckDelimiter => {
                if !bit {
                    return RxStep::Error(ErrorKind::Form(FormViolation::AckDelimiter));
                }
                if !self.crc_ok {
                    return RxStep::Error(ErrorKind::Crc);
                }
                self.stage = Stage::Eof(0);
                RxStep::Trailer
            }
            Stage::Eof(k) => {
                // A dominant last EOF bit is tolerated by receivers.
                if !bit && usize::from(k) < EOF_BITS - 1 {
                    return RxStep::Error(ErrorKind::Form(FormViolation::EndOfFrame));
                }
                let k = k + 1;
                if usize::from(k) == EOF_BITS {
                    self.stage = Stage::Done;
                    RxStep::Done
                } else {
                    self.stage = Stage::Eof(k);
                    if usize::from(k) == EOF_BITS - 1 {
                        RxStep::Valid
                    } else {
                        RxStep::Trailer
                    }
                }
            }
            Stage::Done => RxStep::Trailer,
        }
    }

    /// Whether the next sampled bit is a stuff bit.
    pub fn next_is_stuff(&self) -> bool {
        self.stage == Stage::Region && !self.raw.is_empty() && self.destuffer.expects_stuff()
    }

    /// Region index of the next data bit, when still inside the region.
    pub fn next_region_index(&self) -> Option<usize> {
        (self.stage == Stage::Region && !self.next_is_stuff()).then_some(self.region.len())
    }

    pub fn next_is_ack_slot(&self) -> bool {
        self.stage == Stage::AckSlot
    }

    pub fn crc_ok(&self) -> bool {
        self.crc_ok
    }

    pub fn acked(&self) -> bool {
        self.acked
    }

    pub fn region(&self) -> &BitString {
        &self.region
    }

    /// Sampled bits including stuff bits.
    pub fn raw(&self) -> &BitString {
        &self.raw
    }

    pub fn raw_len(&self) -> usize {
        self.raw.len()
    }

    pub fn stuff_positions(&self) -> &[usize] {
        &self.stuff_positions
    }

    /// CAN ID once all ID bits are in.
    pub fn can_id(&self) -> Option<u16> {
        (self.region.len() > crate::frame::ID_BITS).then(|| self.region.uint(1..1 + crate::frame::ID_BITS) as u16)
    }

    pub fn dlc(&self) -> Option<u8> {
        (self.region.len() >= HEADER_BITS).then(|| self.region.uint(HEADER_BITS - DLC_BITS..HEADER_BITS) as u8)
    }
}

/// A frame queued for transmission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxRequest {
    pub handle: u64,
    pub can_id: u16,
    /// Bits driven, SOF through EOF.
    pub wire: BitString,
    /// Bits the monitor expects to read back.
    pub expected: BitString,
    /// Wire indices where a mismatch is authenticator-fault evidence rather than a bus error.
    pub lenient: Range<usize>,
    pub arbitration_end: usize,
    pub ack_slot: usize,
    pub stuff_bits: usize,
}

impl TxRequest {
    /// Plain frame or a secured frame whose tag region may be overwritten.
    pub fn from_encoded(handle: u64, can_id: u16, enc: &EncodedFrame, secured: bool) -> Self {
        let lenient = if secured {
            let idx = enc.tag_wire_indices();
            idx[0]..idx[idx.len() - 1] + 1
        } else {
            0..0
        };
        Self {
            handle,
            can_id,
            wire: enc.wire.clone(),
            expected: enc.stuffed.clone(),
            lenient,
            arbitration_end: enc.arbitration_end(),
            ack_slot: enc.ack_slot_index,
            stuff_bits: enc.stuff_positions.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControllerEvent {
    /// This node started driving a frame (SOF).
    TxStarted { handle: u64 },
    TxSuccess { handle: u64, tag_fault: Option<bool>, stuff_bits: usize },
    TxFailed { handle: u64, kind: ErrorKind, tag_fault: Option<bool>, aborted: bool },
    ArbitrationLost { handle: u64 },
    /// A frame from another node passed the sixth EOF bit.
    Received { region: BitString, raw: BitString, stuff_positions: Vec<usize> },
    RxError(ErrorKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Idle,
    Frame,
    ErrorFlag(u8),
    ErrorDelimiter(u8),
    Intermission(u8),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub timing: BitTimingConfig,
    pub send_ack: bool,
    pub max_retransmissions: u32,
    /// Emit no error flags; used by passive observers.
    pub silent: bool,
}

impl ControllerConfig {
    pub const DEFAULT_MAX_RETRANSMISSIONS: u32 = 3;

    pub fn new(timing: BitTimingConfig) -> Self {
        Self {
            timing,
            send_ack: true,
            max_retransmissions: Self::DEFAULT_MAX_RETRANSMISSIONS,
            silent: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ControllerStats {
    pub error_flags_sent: u64,
    pub frames_received: u64,
    pub frames_transmitted: u64,
}

struct ActiveTx {
    index: usize,
    tag_fault: bool,
}

pub struct Controller {
    cfg: ControllerConfig,
    clock: BitClock,
    mode: Mode,
    rx: RxDecoder,
    queue: Vec<(u64, TxRequest)>,
    next_seq: u64,
    active: Option<ActiveTx>,
    attempts: u32,
    bit_drive: DriveLevel,
    events: Vec<ControllerEvent>,
    stats: ControllerStats,
    frames_started: u64,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Self {
        Self {
            cfg,
            clock: BitClock::new(cfg.timing),
            mode: Mode::Idle,
            rx: RxDecoder::new(),
            queue: Vec::new(),
            next_seq: 0,
            active: None,
            attempts: 0,
            bit_drive: DriveLevel::PassiveRecessive,
            events: Vec::new(),
            stats: ControllerStats::default(),
            frames_started: 0,
        }
    }

    /// Frames this node has seen start; changes whenever the decoder is reset.
    pub fn frames_started(&self) -> u64 {
        self.frames_started
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn clock(&self) -> &BitClock {
        &self.clock
    }

    pub fn clock_mut(&mut self) -> &mut BitClock {
        &mut self.clock
    }

    pub fn rx(&self) -> &RxDecoder {
        &self.rx
    }

    pub fn stats(&self) -> &ControllerStats {
        &self.stats
    }

    pub fn enqueue(&mut self, req: TxRequest) {
        self.queue.push((self.next_seq, req));
        self.next_seq += 1;
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// CAN ID of the frame being transmitted.
    pub fn current_request_id(&self) -> Option<u16> {
        self.active.as_ref().map(|a| self.queue[a.index].1.can_id)
    }

    pub fn is_transmitting(&self) -> bool {
        self.active.is_some()
    }

    /// Inside a data frame (transmitting or receiving).
    pub fn in_frame(&self) -> bool {
        self.mode == Mode::Frame
    }

    pub fn is_idle(&self) -> bool {
        self.mode == Mode::Idle
    }

    pub fn drain_events(&mut self) -> std::vec::Drain<'_, ControllerEvent> {
        self.events.drain(..)
    }

    pub fn has_events(&self) -> bool {
        !self.events.is_empty()
    }

    /// Drive for the current quantum.
    pub fn drive(&self) -> DriveLevel {
        self.bit_drive
    }

    /// Processes the level observed this quantum. `own_drive` is what the
    /// node actually drove, so it never synchronizes on its own dominant edge.
    pub fn observe(&mut self, level: WireLevel, own_drive: DriveLevel) -> ClockTick {
        let tick = self.clock.on_quantum(level, own_drive != DriveLevel::Dominant);
        if tick.hard_synced {
            self.on_hard_sync();
        }
        if let Some(s) = tick.sampled {
            self.on_sample(s.bit());
        }
        if tick.bit_end {
            self.on_bit_start();
        }
        tick
    }

    fn pick_request(&self) -> Option<usize> {
        self.queue
            .iter()
            .enumerate()
            .min_by_key(|(_, (seq, r))| (r.can_id, *seq))
            .map(|(i, _)| i)
    }

    fn start_frame(&mut self) {
        self.mode = Mode::Frame;
        self.rx = RxDecoder::new();
        self.frames_started += 1;
        self.clock.arm_hard_sync(false);
        if let Some(index) = self.pick_request() {
            self.active = Some(ActiveTx { index, tag_fault: false });
            self.bit_drive = DriveLevel::Dominant;
            let handle = self.queue[index].1.handle;
            self.events.push(ControllerEvent::TxStarted { handle });
        } else {
            self.bit_drive = DriveLevel::PassiveRecessive;
        }
    }

    fn on_hard_sync(&mut self) {
        match self.mode {
            Mode::Idle | Mode::Intermission(_) => self.start_frame(),
            _ => {}
        }
    }

    fn on_bit_start(&mut self) {
        self.bit_drive = match self.mode {
            Mode::Idle => {
                if !self.queue.is_empty() {
                    self.start_frame();
                }
                self.bit_drive
            }
            Mode::Frame => {
                if let Some(a) = &self.active {
                    let req = &self.queue[a.index].1;
                    let i = self.rx.raw_len();
                    DriveLevel::for_bit(req.wire.get(i).unwrap_or(true) || i == req.ack_slot)
                } else if self.cfg.send_ack && self.rx.next_is_ack_slot() && self.rx.crc_ok() {
                    DriveLevel::Dominant
                } else {
                    DriveLevel::PassiveRecessive
                }
            }
            Mode::ErrorFlag(_) if !self.cfg.silent => DriveLevel::Dominant,
            _ => DriveLevel::PassiveRecessive,
        };
    }

    fn signal_error(&mut self, kind: ErrorKind) {
        if let Some(a) = self.active.take() {
            let (_, req) = &self.queue[a.index];
            let handle = req.handle;
            let tag_fault = self.tag_fault_verdict(&a, req);
            self.attempts += 1;
            let aborted = self.attempts > self.cfg.max_retransmissions;
            if aborted {
                self.queue.remove(a.index);
                self.attempts = 0;
            }
            self.events.push(ControllerEvent::TxFailed {
                handle,
                kind,
                tag_fault,
                aborted,
            });
        } else {
            self.events.push(ControllerEvent::RxError(kind));
        }
        if !self.cfg.silent {
            self.stats.error_flags_sent += 1;
        }
        self.mode = Mode::ErrorFlag(0);
        self.clock.arm_hard_sync(false);
    }

    /// Whether the tag region was faulty, once it has been fully read back.
    fn tag_fault_verdict(&self, a: &ActiveTx, req: &TxRequest) -> Option<bool> {
        (!req.lenient.is_empty() && self.rx.raw_len() >= req.lenient.end).then_some(a.tag_fault)
    }

    fn on_sample(&mut self, bit: bool) {
        match self.mode {
            Mode::Idle | Mode::Intermission(_) if !bit => {
                // Dominant sample without a preceding edge: treat as SOF.
                self.start_frame();
                self.frame_sample(bit);
            }
            Mode::Idle => {}
            Mode::Intermission(left) => {
                self.mode = if left <= 1 { Mode::Idle } else { Mode::Intermission(left - 1) };
                if self.mode == Mode::Idle {
                    self.clock.arm_hard_sync(true);
                }
            }
            Mode::Frame => self.frame_sample(bit),
            Mode::ErrorFlag(sent) => {
                let sent = sent + 1;
                self.mode = if sent >= ERROR_FLAG_BITS {
                    Mode::ErrorDelimiter(0)
                } else {
                    Mode::ErrorFlag(sent)
                };
            }
            Mode::ErrorDelimiter(n) => {
                let n = if bit { n + 1 } else { 0 };
                if n >= ERROR_DELIMITER_BITS {
                    self.enter_intermission();
                } else {
                    self.mode = Mode::ErrorDelimiter(n);
                }
            }
        }
    }

    fn enter_intermission(&mut self) {
        self.mode = Mode::Intermission(INTERMISSION_BITS);
        self.clock.arm_hard_sync(true);
    }

    fn frame_sample(&mut self, bit: bool) {
        let index = self.rx.raw_len();
        if let Some(a) = &mut self.active {
            let req = &self.queue[a.index].1;
            let expected = req.expected.get(index).unwrap_or(true);
            if index == req.ack_slot {
                if bit {
                    self.rx.push(bit);
                    self.signal_error(ErrorKind::Ack);
                    return;
                }
            } else if bit != expected {
                if req.lenient.contains(&index) {
                    a.tag_fault = true;
                } else if index <= req.arbitration_end && req.wire[index] && !bit {
                    let handle = req.handle;
                    self.active = None;
                    self.events.push(ControllerEvent::ArbitrationLost { handle });
                } else {
                    self.rx.push(bit);
                    self.signal_error(ErrorKind::Bit);
                    return;
                }
            }
            if self.active.is_some() {
                self.rx.push(bit);
                if index + 1 == self.queue[self.active.as_ref().expect("active").index].1.wire.len() {
                    self.finish_tx();
                }
                return;
            }
        }
        match self.rx.push(bit) {
            RxStep::Error(kind) => self.signal_error(kind),
            RxStep::Valid => {
                self.stats.frames_received += 1;
                self.events.push(ControllerEvent::Received {
                    region: self.rx.region().clone(),
                    raw: self.rx.raw().clone(),
                    stuff_positions: self.rx.stuff_positions().to_vec(),
                });
            }
            RxStep::Done => self.enter_intermission(),
            _ => {}
        }
    }

    fn finish_tx(&mut self) {
        let a = self.active.take().expect("active transmission");
        let (_, req) = self.queue.remove(a.index);
        let tag_fault = (!req.lenient.is_empty()).then_some(a.tag_fault);
        self.attempts = 0;
        self.stats.frames_transmitted += 1;
        self.events.push(ControllerEvent::TxSuccess {
            handle: req.handle,
            tag_fault,
            stuff_bits: req.stuff_bits,
        });
        self.enter_intermission();
    }
}
