//! Bit-exact CAN base frame codec: field layout, CRC-15, bit stuffing.
//!
//! Frames are laid out as
//!
//! ```text
//! SOF | ID(11) | RTR IDE r0 | DLC(4) | payload(8*DLC) | CRC(15) | CRC-del | ACK | ACK-del | EOF(7)
//! ```
//!
//! Stuffing covers SOF through the last CRC bit. The trailer (CRC delimiter,
//! ACK field, EOF) is fixed-form and never stuffed.
//!
//! A secured frame carries `app_data || counter_lsb(4) || tag(24)` as its
//! payload, so the tag always occupies the trailing 24 payload bits.

use std::ops::Range;

use thiserror::Error;

use crate::bits::BitString;

pub const ID_BITS: usize = 11;
pub const DLC_BITS: usize = 4;
pub const CRC_BITS: usize = 15;
pub const TAG_BITS: usize = 24;
pub const COUNTER_LSB_BITS: usize = 4;
/// Bits of a secured payload that are not application data.
pub const SECURED_OVERHEAD_BITS: usize = TAG_BITS + COUNTER_LSB_BITS;
pub const MAX_DLC: u8 = 8;
pub const MAX_CAN_ID: u16 = 0x7ff;
/// SOF + ID + control flags + DLC.
pub const HEADER_BITS: usize = 1 + ID_BITS + 3 + DLC_BITS;
pub const EOF_BITS: usize = 7;
/// CRC delimiter, ACK slot, ACK delimiter and EOF.
pub const TRAILER_BITS: usize = 3 + EOF_BITS;
/// Identical consecutive bits after which a stuff bit is inserted.
pub const STUFF_RUN: u8 = 5;

const CRC15_POLY: u16 = 0x4599;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("stuff error: six identical bits ending at wire index {position}")]
    Stuff { position: usize },
    #[error("crc mismatch: received {received:#06x}, computed {computed:#06x}")]
    Crc { received: u16, computed: u16 },
    #[error("form error: {0}")]
    Form(FormViolation),
    #[error("override has {actual} bits, payload has {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid frame: {0}")]
    InvalidFrame(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum FormViolation {
    Truncated,
    DominantSof,
    CrcDelimiter,
    AckDelimiter,
    EndOfFrame,
    DlcOutOfRange,
    TooShortForSecurity,
}

impl std::fmt::Display for FormViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Truncated => "stream ends before end of frame",
            Self::DominantSof => "start of frame is not dominant",
            Self::CrcDelimiter => "CRC delimiter is dominant",
            Self::AckDelimiter => "ACK delimiter is dominant",
            Self::EndOfFrame => "dominant bit in end of frame",
            Self::DlcOutOfRange => "DLC above 8",
            Self::TooShortForSecurity => "secured frame needs DLC >= 4",
        };
        f.write_str(s)
    }
}

/// A logical CAN base frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub can_id: u16,
    pub dlc: u8,
    /// Application bits: `8*dlc` for plain frames, `8*dlc - 28` for secured ones.
    pub app_data: BitString,
    pub counter_lsb: u8,
    pub tag: u32,
    pub secured: bool,
}

impl Frame {
    /// A plain (unsecured) data frame.
    pub fn plain(can_id: u16, data: &[u8]) -> Result<Self, CodecError> {
        if can_id > MAX_CAN_ID {
            return Err(CodecError::InvalidFrame("CAN ID exceeds 11 bits"));
        }
        if data.len() > usize::from(MAX_DLC) {
            return Err(CodecError::InvalidFrame("more than 8 data bytes"));
        }
        Ok(Self {
            can_id,
            dlc: data.len() as u8,
            app_data: BitString::from_bytes(data),
            counter_lsb: 0,
            tag: 0,
            secured: false,
        })
    }

    /// A secured frame; `app_data` must be exactly `8*dlc - 28` bits.
    pub fn secured(
        can_id: u16,
        dlc: u8,
        app_data: BitString,
        counter_lsb: u8,
        tag: u32,
    ) -> Result<Self, CodecError> {
        if can_id > MAX_CAN_ID {
            return Err(CodecError::InvalidFrame("CAN ID exceeds 11 bits"));
        }
        let Some(app_bits) = secured_app_bits(dlc) else {
            return Err(CodecError::InvalidFrame("secured frames need 4 <= DLC <= 8"));
        };
        if app_data.len() != app_bits {
            return Err(CodecError::InvalidFrame("app data length does not match DLC"));
        }
        if counter_lsb > 0xf || tag > 0xff_ffff {
            return Err(CodecError::InvalidFrame("counter or tag out of range"));
        }
        Ok(Self {
            can_id,
            dlc,
            app_data,
            counter_lsb,
            tag,
            secured: true,
        })
    }

    pub fn payload_len(&self) -> usize {
        usize::from(self.dlc) * 8
    }

    pub fn payload_bits(&self) -> BitString {
        let mut p = self.app_data.clone();
        if self.secured {
            p.push_uint(u64::from(self.counter_lsb), COUNTER_LSB_BITS);
            p.push_uint(u64::from(self.tag), TAG_BITS);
        }
        p
    }

    /// Payload bits with the tag replaced; used to build the wire override.
    pub fn payload_with_tag(&self, tag: u32) -> BitString {
        let mut f = self.clone();
        f.tag = tag & 0xff_ffff;
        f.payload_bits()
    }

    /// Data bytes (plain frames), zero-padded when the bit count is not a byte multiple.
    pub fn data_bytes(&self) -> Vec<u8> {
        self.payload_bits().to_bytes()
    }

    fn from_payload(can_id: u16, dlc: u8, payload: &BitString, secured: bool) -> Result<Self, CodecError> {
        if !secured {
            return Ok(Self {
                can_id,
                dlc,
                app_data: payload.clone(),
                counter_lsb: 0,
                tag: 0,
                secured: false,
            });
        }
        let app = secured_app_bits(dlc).ok_or(CodecError::Form(FormViolation::TooShortForSecurity))?;
        Ok(Self {
            can_id,
            dlc,
            app_data: payload.slice(0..app),
            counter_lsb: payload.uint(app..app + COUNTER_LSB_BITS) as u8,
            tag: payload.uint(app + COUNTER_LSB_BITS..app + SECURED_OVERHEAD_BITS) as u32,
            secured: true,
        })
    }
}

/// Application bits available in a secured frame of the given DLC.
pub fn secured_app_bits(dlc: u8) -> Option<usize> {
    (4..=MAX_DLC)
        .contains(&dlc)
        .then(|| usize::from(dlc) * 8 - SECURED_OVERHEAD_BITS)
}

/// Smallest DLC whose secured layout fits `app_bits` of application data.
pub fn secured_dlc_for(app_bits: usize) -> Option<u8> {
    let dlc = (app_bits + SECURED_OVERHEAD_BITS).div_ceil(8).max(4);
    (dlc <= usize::from(MAX_DLC)).then_some(dlc as u8)
}

/// CRC-15/CAN over `bits`, shift register initialised to zero.
pub fn crc15(bits: &BitString) -> u16 {
    let mut crc: u16 = 0;
    for bit in bits.iter() {
        let feedback = bit ^ ((crc >> 14) & 1 == 1);
        crc = (crc << 1) & 0x7fff;
        if feedback {
            crc ^= CRC15_POLY;
        }
    }
    crc
}

/// Incremental destuffing with violation detection.
#[derive(Debug, Clone, Default)]
pub struct Destuffer {
    last: Option<bool>,
    run: u8,
}

impl Destuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Whether the next bit on the wire is a stuff bit.
    pub fn expects_stuff(&self) -> bool {
        self.run == STUFF_RUN
    }

    /// Feeds one wire bit. Returns `Ok(Some(bit))` for a data bit,
    /// `Ok(None)` when a stuff bit was consumed.
    pub fn push(&mut self, bit: bool) -> Result<Option<bool>, ()> {
        if self.run == STUFF_RUN {
            if Some(bit) == self.last {
                return Err(());
            }
            self.last = Some(bit);
            self.run = 1;
            return Ok(None);
        }
        if Some(bit) == self.last {
            self.run += 1;
        } else {
            self.last = Some(bit);
            self.run = 1;
        }
        Ok(Some(bit))
    }
}

/// Inserts an inverse bit after every run of five identical bits.
///
/// Stuff bits count toward the following run. Returns the stuffed stream and
/// the indices of the inserted bits within it.
pub fn stuff_bits(bits: &BitString) -> (BitString, Vec<usize>) {
    let mut out = BitString::with_capacity(bits.len() + bits.len() / 4 + 1);
    let mut positions = Vec::new();
    let mut last = None;
    let mut run = 0u8;
    for b in bits.iter() {
        out.push(b);
        if Some(b) == last {
            run += 1;
        } else {
            last = Some(b);
            run = 1;
        }
        if run == STUFF_RUN {
            positions.push(out.len());
            out.push(!b);
            last = Some(!b);
            run = 1;
        }
    }
    (out, positions)
}

/// Removes stuff bits; the whole input is treated as stuffing region.
pub fn destuff_bits(stuffed: &BitString) -> Result<BitString, CodecError> {
    let mut d = Destuffer::new();
    let mut out = BitString::with_capacity(stuffed.len());
    for (i, b) in stuffed.iter().enumerate() {
        match d.push(b) {
            Ok(Some(bit)) => out.push(bit),
            Ok(None) => {}
            Err(()) => return Err(CodecError::Stuff { position: i }),
        }
    }
    Ok(out)
}

/// Wire image of a frame plus the layout metadata nodes need.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedFrame {
    /// Canonical (expected final) frame, SOF through EOF, unstuffed.
    pub unstuffed: BitString,
    /// Canonical frame as it appears on the wire after stuffing.
    pub stuffed: BitString,
    /// Bits the transmitter actually drives; differs from `stuffed` only in
    /// payload bits when an override was given.
    pub wire: BitString,
    pub stuff_positions: Vec<usize>,
    /// Wire index of each unstuffed bit of the stuffing region.
    pub wire_index: Vec<usize>,
    /// Unstuffed length of the stuffing region (SOF through CRC).
    pub stuff_region_len: usize,
    pub payload_range: Range<usize>,
    pub crc: u16,
    pub ack_slot_index: usize,
    pub eof_range: Range<usize>,
}

impl EncodedFrame {
    /// Wire indices of the tag bits of a secured frame (stuff bits excluded).
    pub fn tag_wire_indices(&self) -> Vec<usize> {
        let end = self.payload_range.end;
        self.wire_index[end - TAG_BITS..end].to_vec()
    }

    /// Wire index of the last bit of the arbitration field (the ID).
    pub fn arbitration_end(&self) -> usize {
        self.wire_index[ID_BITS]
    }

    pub fn stuffed_region_end(&self) -> usize {
        self.ack_slot_index - 1
    }
}

/// Serializes `frame`.
///
/// CRC and stuff layout always come from the canonical frame. With an
/// override, the driven payload bits are replaced while every other wire bit,
/// including stuff bits, stays as in the canonical image.
pub fn encode_frame(frame: &Frame, wire_payload_override: Option<&BitString>) -> Result<EncodedFrame, CodecError> {
    if frame.dlc > MAX_DLC {
        return Err(CodecError::InvalidFrame("DLC above 8"));
    }
    let payload = frame.payload_bits();
    if payload.len() != frame.payload_len() {
        return Err(CodecError::InvalidFrame("payload length does not match DLC"));
    }
    if let Some(o) = wire_payload_override {
        if o.len() != payload.len() {
            return Err(CodecError::LengthMismatch {
                expected: payload.len(),
                actual: o.len(),
            });
        }
    }

    let mut region = BitString::with_capacity(HEADER_BITS + payload.len() + CRC_BITS);
    region.push(false);
    region.push_uint(u64::from(frame.can_id), ID_BITS);
    region.push_uint(0, 3);
    region.push_uint(u64::from(frame.dlc), DLC_BITS);
    region.extend_from(&payload);
    let crc = crc15(&region);
    region.push_uint(u64::from(crc), CRC_BITS);
    let stuff_region_len = region.len();
    let payload_range = HEADER_BITS..HEADER_BITS + payload.len();

    let (mut stuffed, stuff_positions) = stuff_bits(&region);
    let mut wire_index = Vec::with_capacity(stuff_region_len);
    let mut sp = stuff_positions.iter().peekable();
    for i in 0..stuffed.len() {
        if sp.peek() == Some(&&i) {
            sp.next();
        } else {
            wire_index.push(i);
        }
    }
    debug_assert_eq!(wire_index.len(), stuff_region_len);

    let ack_slot_index = stuffed.len() + 1;
    for _ in 0..TRAILER_BITS {
        stuffed.push(true);
    }
    let mut unstuffed = region;
    for _ in 0..TRAILER_BITS {
        unstuffed.push(true);
    }
    let eof_range = stuffed.len() - EOF_BITS..stuffed.len();

    let mut wire = stuffed.clone();
    if let Some(o) = wire_payload_override {
        for (k, bit) in o.iter().enumerate() {
            wire.set(wire_index[payload_range.start + k], bit);
        }
    }

    Ok(EncodedFrame {
        unstuffed,
        stuffed,
        wire,
        stuff_positions,
        wire_index,
        stuff_region_len,
        payload_range,
        crc,
        ack_slot_index,
        eof_range,
    })
}

/// Parses the unstuffed SOF..CRC region of a received frame. The CRC is not checked.
pub fn frame_from_region(region: &BitString, secured: bool) -> Result<Frame, CodecError> {
    if region.len() < HEADER_BITS + CRC_BITS {
        return Err(CodecError::Form(FormViolation::Truncated));
    }
    let n = region.len();
    let can_id = region.uint(1..1 + ID_BITS) as u16;
    let dlc = region.uint(HEADER_BITS - DLC_BITS..HEADER_BITS) as u8;
    if HEADER_BITS + usize::from(dlc) * 8 + CRC_BITS != n {
        return Err(CodecError::Form(FormViolation::Truncated));
    }
    Frame::from_payload(can_id, dlc, &region.slice(HEADER_BITS..n - CRC_BITS), secured)
}

/// Parses a complete stuffed frame image and checks CRC and fixed-form fields.
///
/// The ACK slot may carry either level.
pub fn decode_frame(stuffed: &BitString, secured: bool) -> Result<Frame, CodecError> {
    let mut d = Destuffer::new();
    let mut region = BitString::with_capacity(HEADER_BITS + 64 + CRC_BITS);
    let mut region_len = None;
    let mut i = 0;
    loop {
        if let Some(n) = region_len {
            if region.len() == n && !d.expects_stuff() {
                break;
            }
        }
        let Some(b) = stuffed.get(i) else {
            return Err(CodecError::Form(FormViolation::Truncated));
        };
        match d.push(b) {
            Ok(Some(bit)) => region.push(bit),
            Ok(None) => {}
            Err(()) => return Err(CodecError::Stuff { position: i }),
        }
        i += 1;
        if region.len() == 1 && region[0] {
            return Err(CodecError::Form(FormViolation::DominantSof));
        }
        if region.len() == HEADER_BITS && region_len.is_none() {
            let dlc = region.uint(HEADER_BITS - DLC_BITS..HEADER_BITS) as u8;
            if dlc > MAX_DLC {
                return Err(CodecError::Form(FormViolation::DlcOutOfRange));
            }
            region_len = Some(HEADER_BITS + usize::from(dlc) * 8 + CRC_BITS);
        }
    }

    let trailer = |k: usize| stuffed.get(i + k).ok_or(CodecError::Form(FormViolation::Truncated));
    if !trailer(0)? {
        return Err(CodecError::Form(FormViolation::CrcDelimiter));
    }
    trailer(1)?;
    if !trailer(2)? {
        return Err(CodecError::Form(FormViolation::AckDelimiter));
    }
    for k in 0..EOF_BITS {
        if !trailer(3 + k)? {
            return Err(CodecError::Form(FormViolation::EndOfFrame));
        }
    }

    let n = region.len();
    let received = region.uint(n - CRC_BITS..n) as u16;
    let computed = crc15(&region.slice(0..n - CRC_BITS));
    if received != computed {
        return Err(CodecError::Crc { received, computed });
    }
    let can_id = region.uint(1..1 + ID_BITS) as u16;
    let dlc = region.uint(HEADER_BITS - DLC_BITS..HEADER_BITS) as u8;
    let payload = region.slice(HEADER_BITS..n - CRC_BITS);
    Frame::from_payload(can_id, dlc, &payload, secured)
}
