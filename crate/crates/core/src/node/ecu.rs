//! A regular ECU: sends secured frames (integrity tag aggregated with the
//! source tag) and plain frames, verifies secured frames like an unmodified
//! SecOC receiver, and takes part in counter-reset recovery.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use crate::bits::BitString;
use crate::bpmac::{BpMac, BpMacError, BpMacKeys};
use crate::bus::{BitTimingConfig, BusNode, DriveLevel, WireLevel};
use crate::cmac::Cmac;
use crate::frame::{encode_frame, frame_from_region, secured_dlc_for, CodecError, Frame, ID_BITS};
use crate::secoc::{integrity_tag, verify, FreshnessState, GroupKey, TagWidth, Verdict};

use super::authenticator::MAX_MESSAGE_BITS;
use super::controller::{Controller, ControllerConfig, ControllerEvent, TxRequest};
use super::recovery::{
    announcement_frame, broadcast_app_data, broadcast_counter, parse_reset_request, recovery_reset, reset_request_frame,
    is_reset_request_id, RecoveryChannel, RESET_MSB_BYTES, RESET_THRESHOLD,
};
use super::{NodeEvent, TagTriple, INTERNAL_HANDLE};

/// Consecutive faulty tag regions after which a sender reports the authenticator inactive.
pub const INACTIVE_THRESHOLD: u32 = 3;

#[derive(Debug, Clone)]
pub struct EcuConfig {
    pub node_id: u8,
    pub timing: BitTimingConfig,
    pub max_retransmissions: u32,
    pub tag_width: TagWidth,
    pub group_key: Option<GroupKey>,
    /// Pairwise keys for the IDs this ECU sends secured.
    pub source_keys: BTreeMap<u16, BpMacKeys>,
    /// Recovery channel for the IDs this ECU sends.
    pub recovery_tx: Option<RecoveryChannel>,
    pub listen_secured: BTreeSet<u16>,
    pub listen_plain: BTreeSet<u16>,
    /// Recovery channels whose broadcasts this ECU follows.
    pub recovery_rx: Vec<RecoveryChannel>,
    /// Sends zero source tags; the wire then equals the canonical frame.
    pub zero_source_tag: bool,
}

impl EcuConfig {
    pub fn new(node_id: u8, timing: BitTimingConfig) -> Self {
        Self {
            node_id,
            timing,
            max_retransmissions: ControllerConfig::DEFAULT_MAX_RETRANSMISSIONS,
            tag_width: TagWidth::FULL,
            group_key: None,
            source_keys: BTreeMap::new(),
            recovery_tx: None,
            listen_secured: BTreeSet::new(),
            listen_plain: BTreeSet::new(),
            recovery_rx: Vec::new(),
            zero_source_tag: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EcuError {
    #[error("no source key for CAN ID {0:#05x}")]
    NoSourceKey(u16),
    #[error("no group key configured")]
    NoGroupKey,
    #[error("{0} application bits do not fit a secured frame")]
    DataLength(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    BpMac(#[from] BpMacError),
}

struct SourceState {
    mac: BpMac,
    next_counter: u64,
}

enum Pending {
    Secured { handle: u64, can_id: u16, app: BitString },
    Ready(TxRequest),
}

pub struct Ecu {
    name: String,
    cfg: EcuConfig,
    ctrl: Controller,
    sources: HashMap<u16, SourceState>,
    announce_mac: Option<Cmac>,
    urgent: VecDeque<Pending>,
    pending: VecDeque<Pending>,
    freshness: HashMap<u16, FreshnessState>,
    tag_faults: u32,
    recovery_in_flight: Option<u64>,
    last_drive: DriveLevel,
    events: Vec<NodeEvent>,
}

impl Ecu {
    pub fn new(name: impl Into<String>, cfg: EcuConfig) -> Result<Self, EcuError> {
        let sources = cfg
            .source_keys
            .iter()
            .map(|(&id, k)| {
                Ok((
                    id,
                    SourceState {
                        mac: BpMac::new(k.clone(), MAX_MESSAGE_BITS)?,
                        next_counter: 0,
                    },
                ))
            })
            .collect::<Result<HashMap<_, _>, BpMacError>>()?;
        let announce_mac = cfg
            .recovery_tx
            .as_ref()
            .and_then(|ch| cfg.source_keys.get(&ch.broadcast_id))
            .map(|k| Cmac::new(&k.k1));
        let freshness = cfg
            .listen_secured
            .iter()
            .chain(cfg.recovery_rx.iter().flat_map(|c| c.all_ids().collect::<Vec<_>>()).collect::<Vec<_>>().iter())
            .map(|&id| (id, FreshnessState::default()))
            .collect();
        let ctrl = Controller::new(ControllerConfig {
            max_retransmissions: cfg.max_retransmissions,
            ..ControllerConfig::new(cfg.timing)
        });
        Ok(Self {
            name: name.into(),
            cfg,
            ctrl,
            sources,
            announce_mac,
            urgent: VecDeque::new(),
            pending: VecDeque::new(),
            freshness,
            tag_faults: 0,
            recovery_in_flight: None,
            last_drive: DriveLevel::PassiveRecessive,
            events: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &EcuConfig {
        &self.cfg
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

    /// Frames waiting, including the one in the controller.
    pub fn backlog(&self) -> usize {
        self.urgent.len() + self.pending.len() + self.ctrl.queue_len()
    }

    pub fn is_quiet(&self) -> bool {
        self.backlog() == 0 && self.ctrl.is_idle()
    }

    pub fn freshness(&self, can_id: u16) -> Option<&FreshnessState> {
        self.freshness.get(&can_id)
    }

    pub fn next_counter(&self, can_id: u16) -> Option<u64> {
        self.sources.get(&can_id).map(|s| s.next_counter)
    }

    /// Rolls the receive-side counter for `can_id` back by `amount`.
    pub fn desync(&mut self, can_id: u16, amount: u64) {
        if let Some(st) = self.freshness.get_mut(&can_id) {
            st.last_accepted = st.last_accepted.map(|l| l.saturating_sub(amount));
        }
    }

    /// Queues a secured frame; tags are computed when it reaches the controller.
    pub fn send_secured(&mut self, handle: u64, can_id: u16, app: BitString) -> Result<(), EcuError> {
        if !self.sources.contains_key(&can_id) {
            return Err(EcuError::NoSourceKey(can_id));
        }
        if self.cfg.group_key.is_none() {
            return Err(EcuError::NoGroupKey);
        }
        if secured_dlc_for(app.len()).and_then(crate::frame::secured_app_bits) != Some(app.len()) {
            return Err(EcuError::DataLength(app.len()));
        }
        self.pending.push_back(Pending::Secured { handle, can_id, app });
        Ok(())
    }

    pub fn send_plain(&mut self, handle: u64, can_id: u16, data: &[u8]) -> Result<(), EcuError> {
        let frame = Frame::plain(can_id, data)?;
        let enc = encode_frame(&frame, None)?;
        self.pending.push_back(Pending::Ready(TxRequest::from_encoded(handle, can_id, &enc, false)));
        Ok(())
    }

    /// Builds the wire image of a secured frame with a fresh counter.
    fn build_secured(&mut self, handle: u64, can_id: u16, app: BitString) -> Result<TxRequest, EcuError> {
        let group = self.cfg.group_key.as_ref().ok_or(EcuError::NoGroupKey)?;
        let width = self.cfg.tag_width;
        let src = self.sources.get_mut(&can_id).ok_or(EcuError::NoSourceKey(can_id))?;
        let counter = src.next_counter;
        src.next_counter += 1;
        let mut msg = BitString::from_uint(u64::from(can_id), ID_BITS);
        msg.extend_from(&app);
        let t_s = if self.cfg.zero_source_tag {
            0
        } else {
            width.truncate(src.mac.tag(&msg, counter)?)
        };
        let t_i = width.truncate(integrity_tag(group, can_id, &app, counter));
        let tags = TagTriple::new(t_i, t_s);
        let dlc = secured_dlc_for(app.len()).ok_or(EcuError::DataLength(app.len()))?;
        let frame = Frame::secured(can_id, dlc, app, (counter & 0xf) as u8, t_i)?;
        let wire = frame.payload_with_tag(tags.t);
        let enc = encode_frame(&frame, Some(&wire))?;
        self.events.push(NodeEvent::TagsGenerated {
            handle,
            can_id,
            counter,
            tags,
        });
        Ok(TxRequest::from_encoded(handle, can_id, &enc, true))
    }

    fn feed_controller(&mut self) {
        if self.ctrl.queue_len() > 0 {
            return;
        }
        let Some(p) = self.urgent.pop_front().or_else(|| self.pending.pop_front()) else {
            return;
        };
        let req = match p {
            Pending::Ready(r) => r,
            Pending::Secured { handle, can_id, app } => match self.build_secured(handle, can_id, app) {
                Ok(r) => r,
                Err(_) => {
                    self.events.push(NodeEvent::TxDone {
                        handle,
                        can_id,
                        delivered: false,
                        stuff_bits: 0,
                    });
                    return;
                }
            },
        };
        self.ctrl.enqueue(req);
    }

    fn note_tag_region(&mut self, can_id: Option<u16>, fault: Option<bool>) {
        match fault {
            Some(true) => {
                self.tag_faults += 1;
                if self.tag_faults >= INACTIVE_THRESHOLD {
                    self.tag_faults = 0;
                    self.events.push(NodeEvent::AuthenticatorInactive {
                        can_id: can_id.unwrap_or(0),
                    });
                }
            }
            Some(false) => self.tag_faults = 0,
            None => {}
        }
    }

    fn on_controller_event(&mut self, ev: ControllerEvent, current_id: Option<u16>) {
        let can_id = current_id.unwrap_or(0);
        match ev {
            ControllerEvent::TxStarted { handle } => {
                let can_id = self.ctrl.current_request_id().unwrap_or(can_id);
                self.events.push(NodeEvent::TxStarted { handle, can_id });
            }
            ControllerEvent::ArbitrationLost { handle } => self.events.push(NodeEvent::ArbitrationLost { handle }),
            ControllerEvent::TxSuccess {
                handle,
                tag_fault,
                stuff_bits,
            } => {
                self.note_tag_region(current_id, tag_fault);
                if self.recovery_in_flight == Some(handle) {
                    self.recovery_in_flight = None;
                }
                self.events.push(NodeEvent::TxDone {
                    handle,
                    can_id,
                    delivered: true,
                    stuff_bits,
                });
            }
            ControllerEvent::TxFailed {
                handle,
                kind,
                tag_fault,
                aborted,
            } => {
                self.note_tag_region(current_id, tag_fault);
                self.events.push(NodeEvent::TxAttemptFailed { handle, kind });
                if aborted {
                    if self.recovery_in_flight == Some(handle) {
                        self.recovery_in_flight = None;
                    }
                    self.events.push(NodeEvent::TxDone {
                        handle,
                        can_id,
                        delivered: false,
                        stuff_bits: 0,
                    });
                }
            }
            ControllerEvent::Received { region, .. } => self.on_received(&region),
            ControllerEvent::RxError(kind) => self.events.push(NodeEvent::RxError(kind)),
        }
    }

    fn on_received(&mut self, region: &BitString) {
        let can_id = region.uint(1..1 + ID_BITS) as u16;
        if is_reset_request_id(can_id) {
            if let Ok(f) = frame_from_region(region, false) {
                if let Some((_, target)) = parse_reset_request(&f) {
                    self.on_reset_request(target);
                }
            }
            return;
        }
        if let Some(ch) = self.cfg.recovery_rx.iter().find(|c| c.broadcast_id == can_id).cloned() {
            self.on_broadcast(&ch, region);
            return;
        }
        if self.cfg.listen_secured.contains(&can_id) {
            self.on_secured(can_id, region);
        } else if self.cfg.listen_plain.contains(&can_id) {
            self.events.push(NodeEvent::Verdict {
                can_id,
                accepted: true,
                counter: None,
            });
        }
    }

    fn on_secured(&mut self, can_id: u16, region: &BitString) {
        let (Some(group), Ok(frame)) = (self.cfg.group_key.as_ref(), frame_from_region(region, true)) else {
            self.events.push(NodeEvent::Verdict {
                can_id,
                accepted: false,
                counter: None,
            });
            return;
        };
        let st = self.freshness.entry(can_id).or_default();
        let verdict = verify(group, &frame, st, self.cfg.tag_width);
        let failures = st.consecutive_failures;
        match verdict {
            Verdict::Accept { counter } => self.events.push(NodeEvent::Verdict {
                can_id,
                accepted: true,
                counter: Some(counter),
            }),
            Verdict::Reject => {
                self.events.push(NodeEvent::Verdict {
                    can_id,
                    accepted: false,
                    counter: None,
                });
                if failures > 0 && failures % RESET_THRESHOLD == 0 {
                    let f = reset_request_frame(self.cfg.node_id, can_id);
                    if let Ok(enc) = encode_frame(&f, None) {
                        self.urgent.push_back(Pending::Ready(TxRequest::from_encoded(
                            INTERNAL_HANDLE,
                            f.can_id,
                            &enc,
                            false,
                        )));
                        self.events.push(NodeEvent::ResetRequested { can_id });
                    }
                }
            }
        }
    }

    fn on_broadcast(&mut self, ch: &RecoveryChannel, region: &BitString) {
        let Some(group) = self.cfg.group_key.as_ref() else { return };
        let Ok(frame) = frame_from_region(region, true) else { return };
        let counter = broadcast_counter(&frame.app_data, frame.counter_lsb);
        let fresh = self
            .freshness
            .get(&ch.broadcast_id)
            .and_then(|s| s.last_accepted)
            .map_or(true, |last| counter > last);
        let expected = self.cfg.tag_width.truncate(integrity_tag(group, frame.can_id, &frame.app_data, counter));
        if fresh && expected == frame.tag {
            for id in ch.all_ids() {
                let st = self.freshness.entry(id).or_default();
                st.last_accepted = Some(counter);
                st.consecutive_failures = 0;
            }
            self.events.push(NodeEvent::RecoveryApplied {
                broadcast_id: ch.broadcast_id,
                counter,
            });
        } else {
            self.events.push(NodeEvent::Verdict {
                can_id: ch.broadcast_id,
                accepted: false,
                counter: None,
            });
        }
    }

    fn on_reset_request(&mut self, target: u16) {
        let Some(ch) = self.cfg.recovery_tx.clone() else { return };
        if !ch.ids.contains(&target) || self.recovery_in_flight.is_some() {
            return;
        }
        let Some(mac) = self.announce_mac.clone() else { return };
        let highest = ch
            .all_ids()
            .filter_map(|id| self.sources.get(&id).map(|s| s.next_counter))
            .max()
            .unwrap_or(0);
        let Ok(reset) = recovery_reset(highest, RESET_MSB_BYTES) else {
            return;
        };
        let msb = (reset >> 32) as u32;
        for id in ch.all_ids() {
            if let Some(s) = self.sources.get_mut(&id) {
                s.next_counter = if id == ch.broadcast_id { reset } else { reset + 1 };
            }
        }
        let ann = announcement_frame(&mac, ch.pairwise_id, msb);
        let Ok(enc) = encode_frame(&ann, None) else { return };
        self.urgent
            .push_back(Pending::Ready(TxRequest::from_encoded(INTERNAL_HANDLE, ch.pairwise_id, &enc, false)));
        let handle = INTERNAL_HANDLE - 1 - u64::from(ch.broadcast_id);
        debug_assert!(super::is_internal(handle));
        match self.build_secured(handle, ch.broadcast_id, broadcast_app_data(msb)) {
            Ok(req) => {
                self.urgent.push_back(Pending::Ready(req));
                self.recovery_in_flight = Some(handle);
                self.events.push(NodeEvent::RecoveryStarted {
                    can_id: target,
                    counter: reset,
                });
            }
            Err(_) => {}
        }
    }
}

impl BusNode for Ecu {
    fn drive(&mut self) -> DriveLevel {
        self.last_drive = self.ctrl.drive();
        self.last_drive
    }

    fn observe(&mut self, level: WireLevel) {
        let current_id = self.ctrl_current_id();
        self.ctrl.observe(level, self.last_drive);
        if self.ctrl.has_events() {
            let evs: Vec<_> = self.ctrl.drain_events().collect();
            for ev in evs {
                self.on_controller_event(ev, current_id);
            }
        }
        self.feed_controller();
    }
}

impl Ecu {
    fn ctrl_current_id(&self) -> Option<u16> {
        self.ctrl.current_request_id()
    }
}
