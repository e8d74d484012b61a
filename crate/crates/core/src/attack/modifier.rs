//! Bit-modifying attacker: flips chosen bits of frames on one ID in flight,
//! with the same drive abilities as the authenticator.

use std::collections::BTreeSet;

use crate::bus::{BitTimingConfig, BusNode, DriveLevel, WireLevel};
use crate::node::{Controller, ControllerConfig, FlipOverlay};

#[derive(Debug, Clone)]
pub struct BitModifierConfig {
    pub timing: BitTimingConfig,
    pub target_id: u16,
    /// Destuffed bit indices (SOF = 0) to invert.
    pub flip_indices: BTreeSet<usize>,
}

pub struct BitModifier {
    name: String,
    cfg: BitModifierConfig,
    ctrl: Controller,
    overlay: FlipOverlay,
    flips: u64,
}

impl BitModifier {
    pub fn new(name: impl Into<String>, cfg: BitModifierConfig) -> Self {
        let ctrl = Controller::new(ControllerConfig {
            send_ack: false,
            silent: true,
            max_retransmissions: 0,
            ..ControllerConfig::new(cfg.timing)
        });
        Self {
            name: name.into(),
            cfg,
            ctrl,
            overlay: FlipOverlay::default(),
            flips: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn flips(&self) -> u64 {
        self.flips
    }

    fn plan_bit(&mut self) {
        self.overlay.clear();
        let rx = self.ctrl.rx();
        if !self.ctrl.in_frame() || rx.next_is_stuff() || rx.can_id() != Some(self.cfg.target_id) {
            return;
        }
        if let Some(k) = rx.next_region_index() {
            self.overlay.plan(self.cfg.flip_indices.contains(&k));
        }
    }
}

impl BusNode for BitModifier {
    fn drive(&mut self) -> DriveLevel {
        self.overlay
            .drive(self.ctrl.clock().phase())
            .unwrap_or(DriveLevel::PassiveRecessive)
    }

    fn observe(&mut self, level: WireLevel) {
        let own = self.drive_now();
        let tick = self.ctrl.observe(level, own);
        if let Some(read) = tick.early {
            if self.overlay.on_early(read, self.ctrl.clock_mut()).is_some() {
                self.flips += 1;
            }
        }
        self.ctrl.drain_events();
        if tick.bit_end {
            self.plan_bit();
        }
    }

    fn may_erase(&self) -> bool {
        true
    }
}

impl BitModifier {
    fn drive_now(&self) -> DriveLevel {
        self.overlay
            .drive(self.ctrl.clock().phase())
            .unwrap_or(DriveLevel::PassiveRecessive)
    }
}
