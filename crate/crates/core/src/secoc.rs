//! SecOC-style integrity protection: a truncated CMAC over
//! `can_id || app_data || counter`, a 4-bit on-wire freshness value, and the
//! receiver-side verification that unmodified ECUs run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::BitString;
use crate::cipher::Key128;
use crate::cmac::Cmac;
use crate::frame::Frame;

/// On-wire freshness bits.
pub const FRESHNESS_BITS: u32 = 4;
pub const FRESHNESS_WINDOW: u64 = 1 << FRESHNESS_BITS;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SecOcError {
    #[error("tag width {0} outside 1..=24")]
    InvalidTagWidth(u8),
    #[error("application data of {0} bits exceeds 36")]
    DataTooLong(usize),
}

/// Number of leading tag bits that carry MAC output; the rest are zero.
///
/// 24 is the protocol width. Narrower widths exist so forgery experiments
/// produce measurable success counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TagWidth(u8);

impl TagWidth {
    pub const FULL: TagWidth = TagWidth(24);

    pub fn new(bits: u8) -> Result<Self, SecOcError> {
        if (1..=24).contains(&bits) {
            Ok(Self(bits))
        } else {
            Err(SecOcError::InvalidTagWidth(bits))
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn mask(self) -> u32 {
        (0xff_ffffu32 >> (24 - self.0)) << (24 - self.0)
    }

    pub fn truncate(self, tag: u32) -> u32 {
        tag & self.mask()
    }
}

impl Default for TagWidth {
    fn default() -> Self {
        Self::FULL
    }
}

impl TryFrom<u8> for TagWidth {
    type Error = SecOcError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<TagWidth> for u8 {
    fn from(w: TagWidth) -> u8 {
        w.0
    }
}

/// Key shared by every ECU of a multicast group.
#[derive(Clone)]
pub struct GroupKey {
    key: Key128,
    cmac: Cmac,
}

impl GroupKey {
    pub fn new(key: Key128) -> Self {
        Self {
            key,
            cmac: Cmac::new(&key),
        }
    }

    pub fn bytes(&self) -> &Key128 {
        &self.key
    }
}

impl PartialEq for GroupKey {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl std::fmt::Debug for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GroupKey({}..)", hex::encode(&self.key[..2]))
    }
}

/// MAC input: 16-bit big-endian ID, data bits packed MSB-first and
/// zero-padded to a byte boundary, 64-bit big-endian counter.
pub fn mac_input(can_id: u16, app_data: &BitString, counter: u64) -> Vec<u8> {
    let mut m = Vec::with_capacity(2 + 5 + 8);
    m.extend_from_slice(&can_id.to_be_bytes());
    m.extend_from_slice(&app_data.to_bytes());
    m.extend_from_slice(&counter.to_be_bytes());
    m
}

/// 24-bit integrity tag, the first three CMAC output bytes.
pub fn integrity_tag(key: &GroupKey, can_id: u16, app_data: &BitString, counter: u64) -> u32 {
    let t = key.cmac.mac(&mac_input(can_id, app_data, counter));
    u32::from_be_bytes([0, t[0], t[1], t[2]])
}

/// Smallest counter above `last_accepted` whose low four bits equal `received_lsb`.
pub fn reconstruct_counter(last_accepted: u64, received_lsb: u8) -> u64 {
    let lsb = u64::from(received_lsb) & (FRESHNESS_WINDOW - 1);
    let candidate = (last_accepted & !(FRESHNESS_WINDOW - 1)) | lsb;
    if candidate > last_accepted {
        candidate
    } else {
        candidate.wrapping_add(FRESHNESS_WINDOW)
    }
}

/// Per-ID receive-side freshness state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreshnessState {
    /// `None` until the first frame is accepted; then counter 0 is acceptable.
    pub last_accepted: Option<u64>,
    pub consecutive_failures: u32,
}

impl FreshnessState {
    pub fn candidate(&self, lsb: u8) -> u64 {
        match self.last_accepted {
            Some(last) => reconstruct_counter(last, lsb),
            None => u64::from(lsb & 0xf),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept { counter: u64 },
    Reject,
}

impl Verdict {
    pub fn is_accept(self) -> bool {
        matches!(self, Verdict::Accept { .. })
    }
}

/// Verifies a secured frame and updates freshness state.
pub fn verify(key: &GroupKey, frame: &Frame, state: &mut FreshnessState, width: TagWidth) -> Verdict {
    if !frame.secured {
        state.consecutive_failures += 1;
        return Verdict::Reject;
    }
    let counter = state.candidate(frame.counter_lsb);
    let expected = width.truncate(integrity_tag(key, frame.can_id, &frame.app_data, counter));
    // Compare the whole word; no early exit on the first differing bit.
    let diff = expected ^ frame.tag;
    if diff == 0 {
        state.last_accepted = Some(counter);
        state.consecutive_failures = 0;
        Verdict::Accept { counter }
    } else {
        state.consecutive_failures += 1;
        Verdict::Reject
    }
}
