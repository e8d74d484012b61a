//! AES-CMAC (RFC 4493).

use crate::cipher::{Block, BlockCipher, Key128};

const RB: u128 = 0x87;

fn dbl(v: u128) -> u128 {
    let carry = v >> 127;
    (v << 1) ^ (carry * RB)
}

/// CMAC keyed with one 128-bit key; subkeys derived once.
#[derive(Debug, Clone)]
pub struct Cmac {
    cipher: BlockCipher,
    k1: u128,
    k2: u128,
}

impl Cmac {
    pub fn new(key: &Key128) -> Self {
        let cipher = BlockCipher::new(key);
        let l = u128::from_be_bytes(cipher.encrypt(&[0u8; 16]));
        let k1 = dbl(l);
        let k2 = dbl(k1);
        Self { cipher, k1, k2 }
    }

    pub fn subkeys(&self) -> (Block, Block) {
        (self.k1.to_be_bytes(), self.k2.to_be_bytes())
    }

    pub fn mac(&self, msg: &[u8]) -> Block {
        let full_last = !msg.is_empty() && msg.len() % 16 == 0;
        let n = msg.len().div_ceil(16).max(1);
        let mut x = 0u128;
        for chunk in msg.chunks(16).take(n - 1) {
            let m = u128::from_be_bytes(chunk.try_into().expect("full block"));
            x = u128::from_be_bytes(self.cipher.encrypt(&(x ^ m).to_be_bytes()));
        }
        let tail = &msg[(n - 1) * 16..];
        let last = if full_last {
            u128::from_be_bytes(tail.try_into().expect("full block")) ^ self.k1
        } else {
            let mut padded = [0u8; 16];
            padded[..tail.len()].copy_from_slice(tail);
            padded[tail.len()] = 0x80;
            u128::from_be_bytes(padded) ^ self.k2
        };
        self.cipher.encrypt(&(x ^ last).to_be_bytes())
    }
}
