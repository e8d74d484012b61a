//! Counter-reset recovery: request, reset rule, the authenticator-only
//! announcement and the broadcast of the new counter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::BitString;
use crate::cmac::Cmac;
use crate::frame::Frame;

/// First of the IDs on which receivers request a counter reset; receiver
/// `n` uses `RESET_REQUEST_ID + n` so simultaneous requests do not collide.
pub const RESET_REQUEST_ID: u16 = 0x010;
/// Number of reset request IDs, one per receiver.
pub const RESET_REQUEST_IDS: u16 = 16;
/// Consecutive verification failures that trigger a request.
pub const RESET_THRESHOLD: u32 = 5;
/// Counter bytes carried by the broadcast frame.
pub const RESET_MSB_BYTES: usize = 4;
const ANNOUNCEMENT_MAC_BYTES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecoveryError {
    #[error("counter upper bytes exhausted")]
    Overflow,
    #[error("byte count {0} outside 1..=8")]
    ByteCount(usize),
}

/// Increments the upper `n` bytes of `counter` and zeroes the rest.
pub fn recovery_reset(counter: u64, n: usize) -> Result<u64, RecoveryError> {
    if !(1..=8).contains(&n) {
        return Err(RecoveryError::ByteCount(n));
    }
    let shift = 8 * (8 - n) as u32;
    let upper = counter.checked_shr(shift).unwrap_or(0);
    let max = if n == 8 { u64::MAX } else { (1u64 << (8 * n)) - 1 };
    if upper == max {
        return Err(RecoveryError::Overflow);
    }
    Ok((upper + 1).checked_shl(shift).unwrap_or(0))
}

/// Per-sender IDs used by the recovery exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryChannel {
    /// Plain frame to the authenticator carrying the new counter.
    pub pairwise_id: u16,
    /// Secured broadcast of the new counter to receivers.
    pub broadcast_id: u16,
    /// Secured data IDs whose counters are reset together.
    pub ids: Vec<u16>,
}

impl RecoveryChannel {
    /// Data IDs plus the broadcast ID.
    pub fn all_ids(&self) -> impl Iterator<Item = u16> + '_ {
        self.ids.iter().copied().chain(std::iter::once(self.broadcast_id))
    }
}

pub fn is_reset_request_id(can_id: u16) -> bool {
    (RESET_REQUEST_ID..RESET_REQUEST_ID + RESET_REQUEST_IDS).contains(&can_id)
}

pub fn reset_request_frame(node_id: u8, can_id: u16) -> Frame {
    let [hi, lo] = can_id.to_be_bytes();
    let id = RESET_REQUEST_ID + u16::from(node_id) % RESET_REQUEST_IDS;
    Frame::plain(id, &[node_id, hi, lo]).expect("valid request frame")
}

/// `(requesting node, CAN ID)` of a reset request.
pub fn parse_reset_request(frame: &Frame) -> Option<(u8, u16)> {
    if !is_reset_request_id(frame.can_id) || frame.dlc != 3 {
        return None;
    }
    let b = frame.data_bytes();
    Some((b[0], u16::from_be_bytes([b[1], b[2]])))
}

fn announcement_mac(mac: &Cmac, pairwise_id: u16, msb: u32) -> [u8; ANNOUNCEMENT_MAC_BYTES] {
    let mut m = pairwise_id.to_be_bytes().to_vec();
    m.extend_from_slice(&msb.to_be_bytes());
    let t = mac.mac(&m);
    [t[0], t[1], t[2]]
}

/// Plain frame: counter upper bytes followed by a truncated pairwise MAC.
pub fn announcement_frame(mac: &Cmac, pairwise_id: u16, msb: u32) -> Frame {
    let mut data = msb.to_be_bytes().to_vec();
    data.extend_from_slice(&announcement_mac(mac, pairwise_id, msb));
    Frame::plain(pairwise_id, &data).expect("valid announcement frame")
}

/// Counter upper bytes of a valid announcement.
pub fn parse_announcement(mac: &Cmac, frame: &Frame) -> Option<u32> {
    if frame.dlc != 7 {
        return None;
    }
    let b = frame.data_bytes();
    let msb = u32::from_be_bytes([b[0], b[1], b[2], b[3]]);
    (announcement_mac(mac, frame.can_id, msb) == b[4..7]).then_some(msb)
}

/// Application data of the broadcast frame: upper counter bytes, four pad bits.
pub fn broadcast_app_data(msb: u32) -> BitString {
    let mut b = BitString::from_uint(u64::from(msb), 32);
    b.push_uint(0, 4);
    b
}

/// Full counter carried by a broadcast frame.
pub fn broadcast_counter(app_data: &BitString, counter_lsb: u8) -> u64 {
    (app_data.uint(0..32) << 32) | u64::from(counter_lsb & 0xf)
}
