//! BP-MAC: a Carter-Wegman MAC whose universal hash is a XOR of per-bit
//! cipher outputs, so every bit contribution can be precomputed.
//!
//! A tag over message bits `b_0..b_n` under nonce `c` is
//!
//! ```text
//! default_tag ^ (XOR of bitflip[i] for every set bit i) ^ blinding_tag(c)
//! ```
//!
//! where `default_tag` is the hash of the all-zero message and `bitflip[i]`
//! the difference between bit `i` being 1 and 0. This lets a listener fold in
//! one bit per conditional XOR while the message is still on the wire.

use std::sync::Arc;

use thiserror::Error;

use crate::bits::BitString;
use crate::cipher::{Block, BlockCipher, Key128};

/// Largest table this implementation will derive.
pub const MAX_TABLE_BITS: usize = 1 << 16;
/// Blinding tags carved out of one cipher block.
pub const BLINDING_TAGS_PER_BLOCK: u64 = 5;
const TAG_MASK: u32 = 0xff_ffff;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BpMacError {
    #[error("message has {len} bits, table covers {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("table size {0} above limit")]
    TableTooLarge(usize),
    #[error("hash and masking keys must differ")]
    EqualKeys,
    #[error("online state already finalized")]
    DoubleFinalize,
    #[error("bit fed after finalize")]
    FeedAfterFinalize,
    #[error("finalize called before the nonce was set")]
    MissingNonce,
}

/// The pairwise key pair shared by one sender and the authenticator.
#[derive(Clone, PartialEq, Eq)]
pub struct BpMacKeys {
    pub k1: Key128,
    pub k2: Key128,
}

impl BpMacKeys {
    pub fn new(k1: Key128, k2: Key128) -> Result<Self, BpMacError> {
        if k1 == k2 {
            return Err(BpMacError::EqualKeys);
        }
        Ok(Self { k1, k2 })
    }
}

impl std::fmt::Debug for BpMacKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BpMacKeys(k1={}..)", hex::encode(&self.k1[..2]))
    }
}

/// Cipher input for bit `index` having value `bit`: big-endian index in
/// bytes 0..4, the bit in byte 15.
pub fn bit_block(index: u32, bit: bool) -> Block {
    let mut b = [0u8; 16];
    b[..4].copy_from_slice(&index.to_be_bytes());
    b[15] = u8::from(bit);
    b
}

/// First three bytes of a block, big-endian.
pub fn truncate24(block: &Block) -> u32 {
    u32::from_be_bytes([0, block[0], block[1], block[2]])
}

/// Precomputed per-bit contributions for one hash key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpMacTable {
    pub max_bits: usize,
    pub default_tag: u32,
    pub bitflip: Vec<u32>,
}

pub fn derive_table(keys: &BpMacKeys, max_bits: usize) -> Result<BpMacTable, BpMacError> {
    if max_bits > MAX_TABLE_BITS {
        return Err(BpMacError::TableTooLarge(max_bits));
    }
    let hash = BlockCipher::new(&keys.k1);
    let mut default_tag = 0;
    let mut bitflip = Vec::with_capacity(max_bits);
    for i in 0..max_bits as u32 {
        let zero = truncate24(&hash.encrypt(&bit_block(i, false)));
        let one = truncate24(&hash.encrypt(&bit_block(i, true)));
        default_tag ^= zero;
        bitflip.push(zero ^ one);
    }
    Ok(BpMacTable {
        max_bits,
        default_tag,
        bitflip,
    })
}

fn blinding_block_input(block_index: u64) -> Block {
    (u128::from(block_index)).to_be_bytes()
}

fn split_blinding_block(block: &Block) -> [u32; 5] {
    // Byte 15 is discarded.
    std::array::from_fn(|k| u32::from_be_bytes([0, block[3 * k], block[3 * k + 1], block[3 * k + 2]]))
}

/// Masking tag for `counter`, computed from scratch (one cipher call).
pub fn blinding_tag(keys: &BpMacKeys, counter: u64) -> u32 {
    let block = BlockCipher::new(&keys.k2).encrypt(&blinding_block_input(counter / BLINDING_TAGS_PER_BLOCK));
    split_blinding_block(&block)[(counter % BLINDING_TAGS_PER_BLOCK) as usize]
}

/// Holds the five blinding tags of the most recently encrypted block.
#[derive(Debug, Clone)]
pub struct BlindingCache {
    cipher: BlockCipher,
    block_index: Option<u64>,
    tags: [u32; 5],
    cipher_calls: u64,
}

impl BlindingCache {
    pub fn new(keys: &BpMacKeys) -> Self {
        Self {
            cipher: BlockCipher::new(&keys.k2),
            block_index: None,
            tags: [0; 5],
            cipher_calls: 0,
        }
    }

    pub fn get(&mut self, counter: u64) -> u32 {
        let idx = counter / BLINDING_TAGS_PER_BLOCK;
        if self.block_index != Some(idx) {
            let block = self.cipher.encrypt(&blinding_block_input(idx));
            self.tags = split_blinding_block(&block);
            self.block_index = Some(idx);
            self.cipher_calls += 1;
        }
        self.tags[(counter % BLINDING_TAGS_PER_BLOCK) as usize]
    }

    /// Number of block cipher invocations so far.
    pub fn cipher_calls(&self) -> u64 {
        self.cipher_calls
    }
}

fn hash_bits(table: &BpMacTable, msg_bits: &BitString) -> Result<u32, BpMacError> {
    if msg_bits.len() > table.max_bits {
        return Err(BpMacError::LengthExceeded {
            len: msg_bits.len(),
            max: table.max_bits,
        });
    }
    Ok(msg_bits
        .iter()
        .zip(&table.bitflip)
        .filter(|(b, _)| *b)
        .fold(table.default_tag, |acc, (_, f)| acc ^ f))
}

/// Whole-message tag computation.
pub fn tag_batch(table: &BpMacTable, keys: &BpMacKeys, msg_bits: &BitString, counter: u64) -> Result<u32, BpMacError> {
    Ok(hash_bits(table, msg_bits)? ^ blinding_tag(keys, counter))
}

/// Same as [`tag_batch`] but draws the masking tag from a cache.
pub fn tag_batch_cached(
    table: &BpMacTable,
    blinding: &mut BlindingCache,
    msg_bits: &BitString,
    counter: u64,
) -> Result<u32, BpMacError> {
    Ok(hash_bits(table, msg_bits)? ^ blinding.get(counter))
}

/// Incremental tag computation, one bit at a time.
#[derive(Debug, Clone)]
pub struct OnlineState {
    table: Arc<BpMacTable>,
    acc: u32,
    next_index: usize,
    nonce: Option<u64>,
    finalized: bool,
    xor_count: u64,
}

impl OnlineState {
    pub fn new(table: Arc<BpMacTable>) -> Self {
        let acc = table.default_tag;
        Self {
            table,
            acc,
            next_index: 0,
            nonce: None,
            finalized: false,
            xor_count: 0,
        }
    }

    pub fn feed_bit(&mut self, bit: bool) -> Result<(), BpMacError> {
        if self.finalized {
            return Err(BpMacError::FeedAfterFinalize);
        }
        let Some(&flip) = self.table.bitflip.get(self.next_index) else {
            return Err(BpMacError::LengthExceeded {
                len: self.next_index + 1,
                max: self.table.max_bits,
            });
        };
        if bit {
            self.acc ^= flip;
            self.xor_count += 1;
        }
        self.next_index += 1;
        Ok(())
    }

    pub fn set_nonce(&mut self, counter: u64) {
        self.nonce = Some(counter);
    }

    /// XORs in the masking tag; the only work left after the last bit.
    pub fn finalize(&mut self, blinding: &mut BlindingCache) -> Result<u32, BpMacError> {
        if self.finalized {
            return Err(BpMacError::DoubleFinalize);
        }
        let nonce = self.nonce.ok_or(BpMacError::MissingNonce)?;
        self.finalized = true;
        self.acc ^= blinding.get(nonce);
        self.xor_count += 1;
        Ok(self.acc & TAG_MASK)
    }

    pub fn bits_fed(&self) -> usize {
        self.next_index
    }

    /// Accumulator XORs performed so far.
    pub fn xor_count(&self) -> u64 {
        self.xor_count
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }
}

/// A sender's or authenticator's view of one key pair: table plus cache.
#[derive(Debug, Clone)]
pub struct BpMac {
    pub keys: BpMacKeys,
    pub table: Arc<BpMacTable>,
    pub blinding: BlindingCache,
}

impl BpMac {
    pub fn new(keys: BpMacKeys, max_bits: usize) -> Result<Self, BpMacError> {
        let table = Arc::new(derive_table(&keys, max_bits)?);
        let blinding = BlindingCache::new(&keys);
        Ok(Self { keys, table, blinding })
    }

    pub fn tag(&mut self, msg_bits: &BitString, counter: u64) -> Result<u32, BpMacError> {
        tag_batch_cached(&self.table, &mut self.blinding, msg_bits, counter)
    }

    pub fn online(&self) -> OnlineState {
        OnlineState::new(Arc::clone(&self.table))
    }
}
