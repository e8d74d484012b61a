//! Slow, literal implementations kept apart from the production code paths.
//! Golden vectors are generated from these and the fast code is checked
//! against the committed files.

use crate::bits::BitString;
use crate::bpmac::BpMacKeys;
use crate::cipher::{Block, BlockCipher, Key128};

/// CRC generator x^15 + x^14 + x^10 + x^8 + x^7 + x^4 + x^3 + 1, all 16 coefficients.
const CRC15_GENERATOR: [bool; 16] = {
    let mut g = [false; 16];
    let exps = [15, 14, 10, 8, 7, 4, 3, 0];
    let mut i = 0;
    while i < exps.len() {
        g[15 - exps[i]] = true;
        i += 1;
    }
    g
};

/// Remainder of `bits * x^15` divided by the CAN generator, computed by
/// schoolbook polynomial long division over GF(2).
pub fn crc15_long_division(bits: &BitString) -> u16 {
    let mut dividend: Vec<bool> = bits.iter().collect();
    dividend.extend([false; 15]);
    for i in 0..bits.len() {
        if dividend[i] {
            for (j, g) in CRC15_GENERATOR.iter().enumerate() {
                dividend[i + j] ^= g;
            }
        }
    }
    dividend[bits.len()..]
        .iter()
        .fold(0u16, |acc, &b| (acc << 1) | u16::from(b))
}

fn shift_left_one(block: &Block) -> Block {
    let mut out = [0u8; 16];
    for i in 0..16 {
        let next = if i + 1 < 16 { block[i + 1] >> 7 } else { 0 };
        out[i] = (block[i] << 1) | next;
    }
    out
}

fn xor_blocks(a: &Block, b: &Block) -> Block {
    std::array::from_fn(|i| a[i] ^ b[i])
}

/// Subkey generation as written in RFC 4493, on byte arrays.
pub fn cmac_subkeys(key: &Key128) -> (Block, Block) {
    let cipher = BlockCipher::new(key);
    let l = cipher.encrypt(&[0u8; 16]);
    let mut k1 = shift_left_one(&l);
    if l[0] & 0x80 != 0 {
        k1[15] ^= 0x87;
    }
    let mut k2 = shift_left_one(&k1);
    if k1[0] & 0x80 != 0 {
        k2[15] ^= 0x87;
    }
    (k1, k2)
}

/// AES-CMAC, RFC 4493 algorithm step by step.
pub fn cmac(key: &Key128, msg: &[u8]) -> Block {
    let cipher = BlockCipher::new(key);
    let (k1, k2) = cmac_subkeys(key);
    let mut blocks: Vec<Vec<u8>> = msg.chunks(16).map(<[u8]>::to_vec).collect();
    if blocks.is_empty() {
        blocks.push(Vec::new());
    }
    let last = blocks.pop().expect("at least one block");
    let m_last = if last.len() == 16 {
        xor_blocks(&last.try_into().expect("16 bytes"), &k1)
    } else {
        let mut padded = [0u8; 16];
        padded[..last.len()].copy_from_slice(&last);
        padded[last.len()] = 0x80;
        xor_blocks(&padded, &k2)
    };
    let mut x = [0u8; 16];
    for b in blocks {
        let m: Block = b.try_into().expect("16 bytes");
        x = cipher.encrypt(&xor_blocks(&x, &m));
    }
    cipher.encrypt(&xor_blocks(&x, &m_last))
}

/// BP-MAC straight from its definition: the hash is the XOR, over all
/// `table_bits` positions, of the first three bytes of
/// `E_k1(index || 0.. || bit)`, positions past the message counting as 0;
/// the mask is the `counter % 5`-th three-byte slice of `E_k2(counter / 5)`.
pub fn bpmac(keys: &BpMacKeys, table_bits: usize, msg_bits: &BitString, counter: u64) -> u32 {
    assert!(msg_bits.len() <= table_bits, "message longer than the table");
    let hash_cipher = BlockCipher::new(&keys.k1);
    let mut hash = 0u32;
    for i in 0..table_bits {
        let bit = msg_bits.get(i).unwrap_or(false);
        let mut input = [0u8; 16];
        let idx = i as u32;
        input[0] = (idx >> 24) as u8;
        input[1] = (idx >> 16) as u8;
        input[2] = (idx >> 8) as u8;
        input[3] = idx as u8;
        input[15] = u8::from(bit);
        let out = hash_cipher.encrypt(&input);
        hash ^= (u32::from(out[0]) << 16) | (u32::from(out[1]) << 8) | u32::from(out[2]);
    }
    let mut nonce_block = [0u8; 16];
    let block_index = counter / 5;
    for k in 0..8 {
        nonce_block[8 + k] = (block_index >> (56 - 8 * k)) as u8;
    }
    let out = BlockCipher::new(&keys.k2).encrypt(&nonce_block);
    let s = 3 * (counter % 5) as usize;
    let mask = (u32::from(out[s]) << 16) | (u32::from(out[s + 1]) << 8) | u32::from(out[s + 2]);
    hash ^ mask
}
