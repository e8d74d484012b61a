//! Golden vector files produced from the [`crate::reference`] oracles.

use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bits::BitString;
use crate::bpmac::BpMacKeys;
use crate::reference;

const SEED: u64 = 0x7665_6374;

pub const CRC15_FILE: &str = "crc15_vectors.json";
pub const CMAC_FILE: &str = "cmac_vectors.json";
pub const BPMAC_FILE: &str = "bpmac_vectors.json";

/// Table size of the bpmac vectors: 11 ID bits plus 36 application bits.
pub const BPMAC_TABLE_BITS: usize = 47;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crc15Vector {
    /// Input bits packed MSB-first, zero-padded to a whole byte.
    pub input_hex: String,
    pub bit_length: usize,
    pub crc_hex: String,
}

impl Crc15Vector {
    pub fn input(&self) -> Option<BitString> {
        unpack(&self.input_hex, self.bit_length)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CmacVector {
    pub key: String,
    pub message: String,
    pub mac: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpMacVector {
    pub k1: String,
    pub k2: String,
    pub table_bits: usize,
    pub msg_hex: String,
    pub bit_length: usize,
    pub counter: u64,
    pub tag: String,
}

impl BpMacVector {
    pub fn message(&self) -> Option<BitString> {
        unpack(&self.msg_hex, self.bit_length)
    }
}

fn unpack(hex_str: &str, bit_length: usize) -> Option<BitString> {
    let bits = BitString::from_bytes(&hex::decode(hex_str).ok()?);
    (bits.len() >= bit_length && bits.len() < bit_length + 8).then(|| bits.slice(0..bit_length))
}

fn random_bits(rng: &mut ChaCha8Rng, len: usize) -> BitString {
    (0..len).map(|_| rng.gen::<bool>()).collect()
}

pub fn crc15_vectors() -> Vec<Crc15Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut inputs: Vec<BitString> = ["", "0", "1", "0000000000000000000", "1111111111111111111"]
        .iter()
        .map(|s| BitString::parse(s).expect("literal bits"))
        .collect();
    // SOF, ID 0x123, RTR/IDE/r0, DLC 2, data 0x11 0x22.
    let mut header = BitString::new();
    header.push(false);
    header.push_uint(0x123, 11);
    header.push_uint(0, 3);
    header.push_uint(2, 4);
    header.push_uint(0x1122, 16);
    inputs.push(header);
    for _ in 0..24 {
        let len = rng.gen_range(1..=83);
        inputs.push(random_bits(&mut rng, len));
    }
    inputs
        .into_iter()
        .map(|b| Crc15Vector {
            crc_hex: format!("{:04x}", reference::crc15_long_division(&b)),
            input_hex: hex::encode(b.to_bytes()),
            bit_length: b.len(),
        })
        .collect()
}

pub fn cmac_vectors() -> Vec<CmacVector> {
    const RFC_KEY: &str = "2b7e151628aed2a6abf7158809cf4f3c";
    const RFC_MSG: &str = "6bc1bee22e409f96e93d7e117393172aae2d8a571e03ac9c9eb76fac45af8e5130c81c46a35ce411e5fbc1191a0a52eff69f2445df4f9b17ad2b417be66c3710";
    let mut cases: Vec<([u8; 16], Vec<u8>)> = [0usize, 16, 40, 64]
        .iter()
        .map(|&n| {
            let key = crate::cipher::key_from_hex(RFC_KEY).expect("literal key");
            (key, hex::decode(&RFC_MSG[..2 * n]).expect("literal message"))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    for len in [0, 1, 7, 15, 16, 17, 31, 32, 33, 48] {
        let key: [u8; 16] = rng.gen();
        let msg: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        cases.push((key, msg));
    }
    cases
        .into_iter()
        .map(|(key, msg)| CmacVector {
            key: hex::encode(key),
            message: hex::encode(&msg),
            mac: hex::encode(reference::cmac(&key, &msg)),
        })
        .collect()
}

pub fn bpmac_vectors() -> Vec<BpMacVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut out = Vec::new();
    for _ in 0..4 {
        let keys = loop {
            if let Ok(k) = BpMacKeys::new(rng.gen(), rng.gen()) {
                break k;
            }
        };
        let counters = [0, 1, 4, 5, 9, 10, rng.gen::<u32>().into(), u64::MAX - 1];
        for counter in counters {
            let len = rng.gen_range(0..=47);
            let bits = random_bits(&mut rng, len);
            out.push(BpMacVector {
                k1: hex::encode(keys.k1),
                k2: hex::encode(keys.k2),
                table_bits: BPMAC_TABLE_BITS,
                tag: format!("{:06x}", reference::bpmac(&keys, BPMAC_TABLE_BITS, &bits, counter)),
                msg_hex: hex::encode(bits.to_bytes()),
                bit_length: bits.len(),
                counter,
            });
        }
    }
    out
}

fn render<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("vectors serialize");
    s.push('\n');
    s
}

/// File name and contents of every vector file.
pub fn render_all() -> Vec<(&'static str, String)> {
    vec![
        (CRC15_FILE, render(&crc15_vectors())),
        (CMAC_FILE, render(&cmac_vectors())),
        (BPMAC_FILE, render(&bpmac_vectors())),
    ]
}

pub fn write_all(dir: &Path) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    render_all()
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            Ok(path)
        })
        .collect()
}
