//! Frame-injecting attackers: masquerading ECU, compromised authenticator, replayer.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bits::BitString;
use crate::bpmac::BpMacKeys;
use crate::bus::{BitTimingConfig, BusNode, DriveLevel, WireLevel};
use crate::frame::{encode_frame, frame_from_region, secured_dlc_for, Frame, ID_BITS};
use crate::node::{push_tx_event, Controller, ControllerConfig, ControllerEvent, NodeEvent, TxRequest};
use crate::secoc::{integrity_tag, reconstruct_counter, verify, FreshnessState, GroupKey, TagWidth};

/// How a masquerader picks the source-tag part it cannot compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuessMode {
    Zero,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InjectionStrategy {
    /// Compromised ECU: valid integrity tag, guessed source tag.
    Masquerade { guess: GuessMode },
    /// Compromised authenticator: source keys only, guessed integrity tag.
    CompromisedAuthenticator,
    /// Retransmits a recorded valid frame `lag` frames old.
    Replay { lag: usize },
}

#[derive(Debug, Clone)]
pub struct InjectorConfig {
    pub timing: BitTimingConfig,
    pub target_id: u16,
    pub strategy: InjectionStrategy,
    pub tag_width: TagWidth,
    pub group_key: Option<GroupKey>,
    pub source_keys: BTreeMap<u16, BpMacKeys>,
    pub seed: u64,
}

const REPLAY_HISTORY: usize = 64;

pub struct Injector {
    name: String,
    cfg: InjectorConfig,
    ctrl: Controller,
    rng: ChaCha8Rng,
    freshness: FreshnessState,
    observed_counter: Option<u64>,
    sent_since_observed: u64,
    recorded: VecDeque<BitString>,
    pending: VecDeque<(u64, BitString)>,
    in_flight_counter: Option<u64>,
    last_drive: DriveLevel,
    events: Vec<NodeEvent>,
    attempts: u64,
}

impl Injector {
    pub fn new(name: impl Into<String>, cfg: InjectorConfig) -> Self {
        let ctrl = Controller::new(ControllerConfig::new(cfg.timing));
        Self {
            name: name.into(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            ctrl,
            freshness: FreshnessState::default(),
            observed_counter: None,
            sent_since_observed: 0,
            recorded: VecDeque::new(),
            pending: VecDeque::new(),
            in_flight_counter: None,
            last_drive: DriveLevel::PassiveRecessive,
            events: Vec::new(),
            attempts: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn target_id(&self) -> u16 {
        self.cfg.target_id
    }

    pub fn controller(&self) -> &Controller {
        &self.ctrl
    }

    /// Frames recorded for replay.
    pub fn recorded(&self) -> usize {
        self.recorded.len()
    }

    /// Forgery attempts handed to the controller.
    pub fn attempts(&self) -> u64 {
        self.attempts
    }

    pub fn drain_events(&mut self) -> std::vec::Drain<'_, NodeEvent> {
        self.events.drain(..)
    }

    pub fn has_events(&self) -> bool {
        !self.events.is_empty()
    }

    pub fn backlog(&self) -> usize {
        self.pending.len() + self.ctrl.queue_len()
    }

    /// Queues one attack frame with application data `app` (ignored by the replayer).
    pub fn inject(&mut self, handle: u64, app: BitString) {
        self.pending.push_back((handle, app));
    }

    fn build(&mut self, app: BitString) -> Option<(TxRequest, Option<u64>)> {
        let id = self.cfg.target_id;
        let width = self.cfg.tag_width;
        let dlc = secured_dlc_for(app.len())?;
        match self.cfg.strategy {
            InjectionStrategy::Masquerade { guess } => {
                let group = self.cfg.group_key.as_ref()?;
                let counter = self.freshness.last_accepted.map_or(0, |l| l + 1);
                let t_i = width.truncate(integrity_tag(group, id, &app, counter));
                let g = match guess {
                    GuessMode::Zero => 0,
                    GuessMode::Random => width.truncate(self.rng.gen::<u32>()),
                };
                let frame = Frame::secured(id, dlc, app, (counter & 0xf) as u8, t_i).ok()?;
                let wire = frame.payload_with_tag(t_i ^ g);
                let enc = encode_frame(&frame, Some(&wire)).ok()?;
                Some((TxRequest::from_encoded(0, id, &enc, true), Some(counter)))
            }
            InjectionStrategy::CompromisedAuthenticator => {
                let counter = self.observed_counter.map_or(0, |c| c + 1) + self.sent_since_observed;
                // The attacker is the only authenticator, so nothing flips the
                // tag: the wire carries its guess of the integrity tag.
                let tag = width.truncate(self.rng.gen::<u32>());
                let frame = Frame::secured(id, dlc, app, (counter & 0xf) as u8, tag).ok()?;
                let enc = encode_frame(&frame, None).ok()?;
                self.sent_since_observed += 1;
                Some((TxRequest::from_encoded(0, id, &enc, true), None))
            }
            InjectionStrategy::Replay { lag } => {
                let n = self.recorded.len();
                let region = self.recorded.get(n.checked_sub(lag + 1)?)?;
                let frame = frame_from_region(region, true).ok()?;
                let enc = encode_frame(&frame, None).ok()?;
                Some((TxRequest::from_encoded(0, id, &enc, true), None))
            }
        }
    }

    fn feed_controller(&mut self) {
        if self.ctrl.queue_len() > 0 {
            return;
        }
        let Some((handle, app)) = self.pending.pop_front() else { return };
        match self.build(app) {
            Some((mut req, counter)) => {
                req.handle = handle;
                self.in_flight_counter = counter;
                self.attempts += 1;
                self.ctrl.enqueue(req);
            }
            None => self.events.push(NodeEvent::TxDone {
                handle,
                can_id: self.cfg.target_id,
                delivered: false,
                stuff_bits: 0,
            }),
        }
    }

    fn on_received(&mut self, region: &BitString) {
        let can_id = region.uint(1..1 + ID_BITS) as u16;
        if can_id != self.cfg.target_id {
            return;
        }
        let Ok(frame) = frame_from_region(region, true) else { return };
        if let Some(group) = &self.cfg.group_key {
            verify(group, &frame, &mut self.freshness, self.cfg.tag_width);
        }
        self.observed_counter = Some(match self.observed_counter {
            Some(last) => reconstruct_counter(last, frame.counter_lsb),
            None => u64::from(frame.counter_lsb),
        });
        self.sent_since_observed = 0;
        self.recorded.push_back(region.clone());
        if self.recorded.len() > REPLAY_HISTORY {
            self.recorded.pop_front();
        }
    }
}

impl BusNode for Injector {
    fn drive(&mut self) -> DriveLevel {
        self.last_drive = self.ctrl.drive();
        self.last_drive
    }

    fn observe(&mut self, level: WireLevel) {
        let before = self.ctrl.current_request_id();
        self.ctrl.observe(level, self.last_drive);
        if self.ctrl.has_events() {
            let evs: Vec<_> = self.ctrl.drain_events().collect();
            for ev in evs {
                match ev {
                    ControllerEvent::Received { region, .. } => self.on_received(&region),
                    ControllerEvent::TxSuccess { .. } => {
                        // A delivered forgery carries a valid tag for its counter.
                        if let Some(c) = self.in_flight_counter.take() {
                            self.freshness.last_accepted = Some(c);
                        }
                        push_tx_event(ev, before, None, &mut self.events);
                    }
                    ev => push_tx_event(ev, before, self.ctrl.current_request_id(), &mut self.events),
                }
            }
        }
        self.feed_controller();
    }
}
