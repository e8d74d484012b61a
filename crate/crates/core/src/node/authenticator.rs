//! The authenticator: identifies the source key from the CAN ID, computes
//! the source tag online while the frame is on the wire, and flips the tag
//! bits whose source-tag bit is set.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::bits::BitString;
use crate::bpmac::{BpMac, BpMacError, BpMacKeys, OnlineState};
use crate::bus::{BitTimingConfig, BusNode, DriveLevel, WireLevel};
use crate::cmac::Cmac;
use crate::frame::{frame_from_region, secured_app_bits, COUNTER_LSB_BITS, HEADER_BITS, ID_BITS, TAG_BITS};
use crate::secoc::{reconstruct_counter, TagWidth};

use super::controller::{Controller, ControllerConfig, ControllerEvent};
use super::recovery::{parse_announcement, RecoveryChannel};
use super::{FlipOverlay, NodeEvent, RbfAction};

/// Longest message the authenticator authenticates: 11 ID bits and 36 data bits.
pub const MAX_MESSAGE_BITS: usize = ID_BITS + 36;

#[derive(Debug, Clone)]
pub struct AuthenticatorConfig {
    pub timing: BitTimingConfig,
    pub id_to_key: BTreeMap<u16, BpMacKeys>,
    pub caiba_enabled: BTreeSet<u16>,
    pub responsible_ids: BTreeSet<u16>,
    pub tag_width: TagWidth,
    pub recovery: Vec<RecoveryChannel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlipRecord {
    /// Index among sampled bits of the frame (stuff bits included).
    pub raw_index: usize,
    pub tag_bit: usize,
    pub read: WireLevel,
    pub action: RbfAction,
}

/// What the authenticator did during one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuthFrameLog {
    pub can_id: u16,
    pub counter: Option<u64>,
    pub source_tag: Option<u32>,
    /// Stuff bit positions predicted before each bit, in sampled-bit indices.
    pub predicted_stuff: Vec<usize>,
    pub flips: Vec<FlipRecord>,
    pub overwritten: bool,
    pub completed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuthenticatorStats {
    pub flips_to_dominant: u64,
    pub flips_to_erase: u64,
    pub compensations: u64,
    pub frames_authenticated: u64,
    /// CAIBA-enabled frames seen without a usable key or layout.
    pub passive_frames: u64,
    pub counter_rollbacks: u64,
    /// Accumulator XORs of the online MAC.
    pub mac_xors: u64,
    pub mac_bits: u64,
}

struct KeyEntry {
    mac: BpMac,
    last: Option<u64>,
}

struct InFlight {
    can_id: u16,
    online: Option<OnlineState>,
    tag_start: usize,
    counter_start: usize,
    lsb: u8,
    counter: Option<u64>,
    source_tag: Option<u32>,
    overwrite: bool,
    log: AuthFrameLog,
}

pub struct Authenticator {
    name: String,
    ctrl: Controller,
    keys: HashMap<u16, KeyEntry>,
    enabled_ids: BTreeSet<u16>,
    responsible: BTreeSet<u16>,
    width: TagWidth,
    recovery: Vec<(RecoveryChannel, Cmac)>,
    connected: bool,
    frame_epoch: u64,
    fed: usize,
    frame: Option<InFlight>,
    overlay: FlipOverlay,
    last_drive: DriveLevel,
    stats: AuthenticatorStats,
    events: Vec<NodeEvent>,
}

impl Authenticator {
    pub fn new(name: impl Into<String>, cfg: AuthenticatorConfig) -> Result<Self, BpMacError> {
        let keys = cfg
            .id_to_key
            .iter()
            .map(|(&id, k)| Ok((id, KeyEntry { mac: BpMac::new(k.clone(), MAX_MESSAGE_BITS)?, last: None })))
            .collect::<Result<HashMap<_, _>, BpMacError>>()?;
        let recovery = cfg
            .recovery
            .iter()
            .filter_map(|ch| cfg.id_to_key.get(&ch.broadcast_id).map(|k| (ch.clone(), Cmac::new(&k.k1))))
            .collect();
        let ctrl = Controller::new(ControllerConfig {
            timing: cfg.timing,
            send_ack: false,
            max_retransmissions: 0,
            silent: false,
        });
        Ok(Self {
            name: name.into(),
            ctrl,
            keys,
            enabled_ids: cfg.caiba_enabled,
            responsible: cfg.responsible_ids,
            width: cfg.tag_width,
            recovery,
            connected: true,
            frame_epoch: 0,
            fed: 0,
            frame: None,
            overlay: FlipOverlay::default(),
            last_drive: DriveLevel::PassiveRecessive,
            stats: AuthenticatorStats::default(),
            events: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Physically removes the authenticator from the bus.
    pub fn disconnect(&mut self) {
        self.connected = false;
        self.frame = None;
        self.overlay.clear();
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn responsible_ids(&self) -> &BTreeSet<u16> {
        &self.responsible
    }

    /// Takes over overwriting for `ids`.
    pub fn take_over(&mut self, ids: impl IntoIterator<Item = u16>) {
        self.responsible.extend(ids);
    }

    pub fn stats(&self) -> AuthenticatorStats {
        let mut s = self.stats.clone();
        s.compensations = self.overlay.compensations;
        s
    }

    pub fn holds_key(&self, can_id: u16) -> bool {
        self.keys.contains_key(&can_id)
    }

    pub fn last_counter(&self, can_id: u16) -> Option<u64> {
        self.keys.get(&can_id).and_then(|k| k.last)
    }

    pub fn controller(&self) -> &Controller {
        &self.ctrl
    }

    pub fn drain_events(&mut self) -> std::vec::Drain<'_, NodeEvent> {
        self.events.drain(..)
    }

    pub fn has_events(&self) -> bool {
        !self.events.is_empty()
    }

    fn begin_frame(&mut self) {
        self.fed = 0;
        self.frame = None;
        self.overlay.clear();
    }

    fn on_region_bit(&mut self, index: usize, bit: bool) {
        if index == ID_BITS {
            let region = self.ctrl.rx().region();
            let can_id = region.uint(1..1 + ID_BITS) as u16;
            if !self.enabled_ids.contains(&can_id) {
                return;
            }
            let Some(entry) = self.keys.get(&can_id) else {
                self.stats.passive_frames += 1;
                return;
            };
            let mut online = entry.mac.online();
            for i in 1..=ID_BITS {
                online.feed_bit(region[i]).expect("ID fits the table");
            }
            self.frame = Some(InFlight {
                can_id,
                online: Some(online),
                tag_start: usize::MAX,
                counter_start: usize::MAX,
                lsb: 0,
                counter: None,
                source_tag: None,
                overwrite: self.responsible.contains(&can_id),
                log: AuthFrameLog {
                    can_id,
                    counter: None,
                    source_tag: None,
                    predicted_stuff: Vec::new(),
                    flips: Vec::new(),
                    overwritten: false,
                    completed: false,
                },
            });
            return;
        }
        let Some(f) = self.frame.as_mut() else { return };
        if index == HEADER_BITS - 1 {
            let dlc = self.ctrl.rx().dlc().expect("header complete");
            match secured_app_bits(dlc) {
                Some(app) => {
                    f.counter_start = HEADER_BITS + app;
                    f.tag_start = f.counter_start + COUNTER_LSB_BITS;
                }
                None => {
                    self.stats.passive_frames += 1;
                    self.frame = None;
                }
            }
            return;
        }
        if index < HEADER_BITS {
            return;
        }
        if index < f.counter_start {
            if let Some(o) = f.online.as_mut() {
                o.feed_bit(bit).expect("data fits the table");
            }
        } else if index < f.tag_start {
            f.lsb = (f.lsb << 1) | u8::from(bit);
            if index + 1 == f.tag_start {
                let entry = self.keys.get_mut(&f.can_id).expect("keyed ID");
                let counter = match entry.last {
                    Some(last) => reconstruct_counter(last, f.lsb),
                    None => u64::from(f.lsb),
                };
                let mut online = f.online.take().expect("online state");
                online.set_nonce(counter);
                let tag = online.finalize(&mut entry.mac.blinding).expect("single finalize");
                self.stats.mac_xors += online.xor_count();
                self.stats.mac_bits += online.bits_fed() as u64;
                let tag = self.width.truncate(tag);
                f.counter = Some(counter);
                f.source_tag = Some(tag);
                f.log.counter = Some(counter);
                f.log.source_tag = Some(tag);
            }
        }
    }

    /// Decides whether the bit that starts now is flipped.
    fn plan_bit(&mut self) {
        self.overlay.clear();
        if !self.ctrl.in_frame() {
            return;
        }
        let rx = self.ctrl.rx();
        let Some(f) = self.frame.as_mut() else { return };
        if rx.next_is_stuff() {
            f.log.predicted_stuff.push(rx.raw_len());
            return;
        }
        let (Some(k), Some(tag)) = (rx.next_region_index(), f.source_tag) else {
            return;
        };
        if !f.overwrite || k < f.tag_start || k >= f.tag_start + TAG_BITS {
            return;
        }
        let j = k - f.tag_start;
        let flip = (tag >> (TAG_BITS - 1 - j)) & 1 == 1;
        self.overlay.plan(flip);
    }

    fn on_early(&mut self, read: WireLevel) {
        let Some(action) = self.overlay.on_early(read, self.ctrl.clock_mut()) else {
            return;
        };
        let rx = self.ctrl.rx();
        let raw_index = rx.raw_len();
        let region_index = rx.region().len();
        if let Some(f) = self.frame.as_mut() {
            f.log.overwritten = true;
            f.log.flips.push(FlipRecord {
                raw_index,
                tag_bit: region_index - f.tag_start,
                read,
                action,
            });
        }
        match action {
            RbfAction::DriveDominant => self.stats.flips_to_dominant += 1,
            RbfAction::DriveErase => self.stats.flips_to_erase += 1,
            RbfAction::NoAction => {}
        }
    }

    fn on_controller_event(&mut self, ev: ControllerEvent) {
        match ev {
            ControllerEvent::Received { region, .. } => {
                if let Some(mut f) = self.frame.take() {
                    if let (Some(c), Some(entry)) = (f.counter, self.keys.get_mut(&f.can_id)) {
                        entry.last = Some(c);
                        self.stats.frames_authenticated += 1;
                    }
                    f.log.completed = true;
                    self.events.push(NodeEvent::Authenticated(f.log));
                } else {
                    self.on_plain_frame(&region);
                }
            }
            ControllerEvent::RxError(_) => {
                self.overlay.clear();
                if let Some(f) = self.frame.take() {
                    if f.counter.is_some() {
                        self.stats.counter_rollbacks += 1;
                    }
                    self.events.push(NodeEvent::Authenticated(f.log));
                }
            }
            _ => {}
        }
    }

    fn on_plain_frame(&mut self, region: &BitString) {
        let Ok(frame) = frame_from_region(region, false) else { return };
        let Some((ch, mac)) = self.recovery.iter().find(|(ch, _)| ch.pairwise_id == frame.can_id) else {
            return;
        };
        let Some(msb) = parse_announcement(mac, &frame) else { return };
        let counter = u64::from(msb) << 32;
        for id in ch.all_ids() {
            if let Some(e) = self.keys.get_mut(&id) {
                e.last = Some(counter.wrapping_sub(1));
            }
        }
        self.events.push(NodeEvent::AnnouncementAccepted {
            pairwise_id: frame.can_id,
            counter,
        });
    }
}

impl BusNode for Authenticator {
    fn drive(&mut self) -> DriveLevel {
        if !self.connected {
            return DriveLevel::PassiveRecessive;
        }
        let d = self
            .overlay
            .drive(self.ctrl.clock().phase())
            .unwrap_or_else(|| self.ctrl.drive());
        self.last_drive = d;
        d
    }

    fn observe(&mut self, level: WireLevel) {
        if !self.connected {
            return;
        }
        let tick = self.ctrl.observe(level, self.last_drive);
        if self.ctrl.frames_started() != self.frame_epoch {
            self.frame_epoch = self.ctrl.frames_started();
            self.begin_frame();
        }
        if let Some(read) = tick.early {
            self.on_early(read);
        }
        if tick.sampled.is_some() && self.ctrl.in_frame() {
            while self.fed < self.ctrl.rx().region().len() {
                let i = self.fed;
                let bit = self.ctrl.rx().region()[i];
                self.fed += 1;
                self.on_region_bit(i, bit);
            }
        }
        if self.ctrl.has_events() {
            let evs: Vec<_> = self.ctrl.drain_events().collect();
            for ev in evs {
                self.on_controller_event(ev);
            }
        }
        if tick.bit_end {
            self.plan_bit();
        }
    }

    fn may_erase(&self) -> bool {
        true
    }
}
