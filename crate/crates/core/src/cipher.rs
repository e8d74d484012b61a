//! 128-bit block cipher used by both MAC schemes.

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;

pub type Key128 = [u8; 16];
pub type Block = [u8; 16];

/// AES-128 as a keyed pseudorandom permutation.
#[derive(Clone)]
pub struct BlockCipher(Aes128);

impl BlockCipher {
    pub fn new(key: &Key128) -> Self {
        Self(Aes128::new(GenericArray::from_slice(key)))
    }

    pub fn encrypt(&self, block: &Block) -> Block {
        let mut b = GenericArray::clone_from_slice(block);
        self.0.encrypt_block(&mut b);
        b.into()
    }
}

impl std::fmt::Debug for BlockCipher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("BlockCipher(..)")
    }
}

/// Parses a 32-character hex key.
pub fn key_from_hex(s: &str) -> Result<Key128, hex::FromHexError> {
    let mut k = [0u8; 16];
    hex::decode_to_slice(s.trim(), &mut k)?;
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fips197_aes128_vector() {
        let key = key_from_hex("000102030405060708090a0b0c0d0e0f").unwrap();
        let pt: Block = hex::decode("00112233445566778899aabbccddeeff").unwrap().try_into().unwrap();
        let ct = BlockCipher::new(&key).encrypt(&pt);
        assert_eq!(hex::encode(ct), "69c4e0d86a7b0430d8cdb78070b4c55a");
    }
}
