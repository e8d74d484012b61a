//! Jammer: holds the bus dominant for a number of bits inside one frame.

use crate::bus::{BitTimingConfig, BusNode, DriveLevel, WireLevel};
use crate::node::{Controller, ControllerConfig};

#[derive(Debug, Clone, Copy)]
struct Window {
    epoch: u64,
    from_bit: usize,
    bits: usize,
}

pub struct Jammer {
    name: String,
    ctrl: Controller,
    armed: Option<Window>,
    jamming: bool,
    remaining: usize,
    bits_jammed: u64,
}

impl Jammer {
    pub fn new(name: impl Into<String>, timing: BitTimingConfig) -> Self {
        let ctrl = Controller::new(ControllerConfig {
            send_ack: false,
            silent: true,
            max_retransmissions: 0,
            ..ControllerConfig::new(timing)
        });
        Self {
            name: name.into(),
            ctrl,
            armed: None,
            jamming: false,
            remaining: 0,
            bits_jammed: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bits_jammed(&self) -> u64 {
        self.bits_jammed
    }

    /// Jams `bits` sampled bits starting at bit `from_bit` (SOF = 0) of the
    /// frame currently starting, or of the next one.
    pub fn arm(&mut self, from_bit: usize, bits: usize) {
        let current = self.ctrl.in_frame() && self.ctrl.rx().raw_len() <= 1;
        let epoch = self.ctrl.frames_started() + u64::from(!current);
        self.armed = Some(Window { epoch, from_bit, bits });
    }

    pub fn is_armed(&self) -> bool {
        self.armed.is_some()
    }
}

impl BusNode for Jammer {
    fn drive(&mut self) -> DriveLevel {
        if self.jamming {
            DriveLevel::Dominant
        } else {
            DriveLevel::PassiveRecessive
        }
    }

    fn observe(&mut self, level: WireLevel) {
        let own = self.drive();
        let tick = self.ctrl.observe(level, own);
        self.ctrl.drain_events();
        if !tick.bit_end {
            return;
        }
        if self.remaining > 0 {
            self.remaining -= 1;
            self.bits_jammed += 1;
            return;
        }
        self.jamming = false;
        let Some(w) = self.armed else { return };
        let epoch = self.ctrl.frames_started();
        if epoch > w.epoch {
            self.armed = None;
        } else if epoch == w.epoch && self.ctrl.in_frame() && self.ctrl.rx().raw_len() >= w.from_bit {
            self.armed = None;
            if w.bits > 0 {
                self.jamming = true;
                self.remaining = w.bits - 1;
                self.bits_jammed += 1;
            }
        }
    }
}
