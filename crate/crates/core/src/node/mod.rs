//! Quantum-driven node roles: ECUs (secured and plain senders, SecOC
//! receivers), the authenticator, and the recovery protocol.

pub mod authenticator;
pub mod controller;
pub mod ecu;
pub mod recovery;

use serde::Serialize;

use crate::bus::{BitClock, DriveLevel, WireLevel};

pub use authenticator::{AuthFrameLog, Authenticator, AuthenticatorConfig, AuthenticatorStats, FlipRecord};
pub use controller::{Controller, ControllerConfig, ControllerEvent, ErrorKind, RxDecoder, RxStep, TxRequest};
pub use ecu::{Ecu, EcuConfig, EcuError};

/// Handle for frames a node generates on its own (reset requests, recovery).
pub const INTERNAL_HANDLE: u64 = u64::MAX;

/// Handles above this value belong to node-generated frames.
pub const INTERNAL_HANDLE_FLOOR: u64 = u64::MAX - 0x1000;

pub fn is_internal(handle: u64) -> bool {
    handle > INTERNAL_HANDLE_FLOOR
}

/// Translates the transmit-side controller events. `before` is the ID being
/// sent when the quantum began, `after` the one being sent now.
pub(crate) fn push_tx_event(ev: ControllerEvent, before: Option<u16>, after: Option<u16>, out: &mut Vec<NodeEvent>) {
    match ev {
        ControllerEvent::TxStarted { handle } => out.push(NodeEvent::TxStarted {
            handle,
            can_id: after.or(before).unwrap_or(0),
        }),
        ControllerEvent::ArbitrationLost { handle } => out.push(NodeEvent::ArbitrationLost { handle }),
        ControllerEvent::TxSuccess { handle, stuff_bits, .. } => out.push(NodeEvent::TxDone {
            handle,
            can_id: before.unwrap_or(0),
            delivered: true,
            stuff_bits,
        }),
        ControllerEvent::TxFailed {
            handle, kind, aborted, ..
        } => {
            out.push(NodeEvent::TxAttemptFailed { handle, kind });
            if aborted {
                out.push(NodeEvent::TxDone {
                    handle,
                    can_id: before.unwrap_or(0),
                    delivered: false,
                    stuff_bits: 0,
                });
            }
        }
        ControllerEvent::RxError(kind) => out.push(NodeEvent::RxError(kind)),
        ControllerEvent::Received { .. } => {}
    }
}

/// The three tags of one secured frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TagTriple {
    /// Integrity tag under the group key.
    pub t_i: u32,
    /// Source tag under the sender's pairwise key.
    pub t_s: u32,
    /// Tag the sender drives.
    pub t: u32,
}

impl TagTriple {
    pub fn new(t_i: u32, t_s: u32) -> Self {
        Self { t_i, t_s, t: t_i ^ t_s }
    }
}

/// Observable node-level events, drained by the scenario after every quantum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeEvent {
    TxStarted { handle: u64, can_id: u16 },
    TxAttemptFailed { handle: u64, kind: ErrorKind },
    ArbitrationLost { handle: u64 },
    TxDone { handle: u64, can_id: u16, delivered: bool, stuff_bits: usize },
    RxError(ErrorKind),
    Verdict { can_id: u16, accepted: bool, counter: Option<u64> },
    TagsGenerated { handle: u64, can_id: u16, counter: u64, tags: TagTriple },
    AuthenticatorInactive { can_id: u16 },
    ResetRequested { can_id: u16 },
    RecoveryStarted { can_id: u16, counter: u64 },
    RecoveryApplied { broadcast_id: u16, counter: u64 },
    AnnouncementAccepted { pairwise_id: u16, counter: u64 },
    Authenticated(AuthFrameLog),
}

/// Reaction of a bit-flipping node to one tag bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RbfAction {
    NoAction,
    DriveDominant,
    DriveErase,
}

impl RbfAction {
    pub fn drive(self) -> Option<DriveLevel> {
        match self {
            RbfAction::NoAction => None,
            RbfAction::DriveDominant => Some(DriveLevel::Dominant),
            RbfAction::DriveErase => Some(DriveLevel::Erase),
        }
    }
}

/// Chooses the flip for a bit read early in its bit time.
pub fn rbf_action(read: WireLevel, flip: bool) -> RbfAction {
    match (flip, read) {
        (false, _) => RbfAction::NoAction,
        (true, WireLevel::Recessive) => RbfAction::DriveDominant,
        (true, WireLevel::Dominant) => RbfAction::DriveErase,
    }
}

/// First quantum of the bit in which a flipping node may drive.
pub const FLIP_FROM_PHASE: u16 = 2;
/// Extension applied when a flip creates a synchronization edge.
pub const COMPENSATION_QUANTA: u16 = 2;

/// Per-bit flip state shared by the authenticator and bit-modifying attackers.
#[derive(Debug, Clone, Default)]
pub struct FlipOverlay {
    planned: bool,
    action: Option<RbfAction>,
    pub compensations: u64,
}

impl FlipOverlay {
    /// Arms (or disarms) a flip for the bit that starts now.
    pub fn plan(&mut self, flip: bool) {
        self.planned = flip;
        self.action = None;
    }

    pub fn clear(&mut self) {
        self.planned = false;
        self.action = None;
    }

    pub fn is_planned(&self) -> bool {
        self.planned
    }

    /// Decides the flip from the early read. A recessive-to-dominant flip
    /// after a recessive bit makes every other node resynchronize on the
    /// flip edge, so the bit is lengthened to match.
    pub fn on_early(&mut self, read: WireLevel, clock: &mut BitClock) -> Option<RbfAction> {
        if !self.planned {
            return None;
        }
        let action = rbf_action(read, true);
        if action == RbfAction::DriveDominant && clock.last_sample() == WireLevel::Recessive {
            clock.lengthen(COMPENSATION_QUANTA.min(clock.config().sjw));
            self.compensations += 1;
        }
        self.action = Some(action);
        Some(action)
    }

    pub fn drive(&self, phase: u16) -> Option<DriveLevel> {
        if phase < FLIP_FROM_PHASE {
            return None;
        }
        self.action.and_then(RbfAction::drive)
    }
}
