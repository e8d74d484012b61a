//! Adversary nodes and the crypto-level forgery experiment.

mod injector;
mod jammer;
mod modifier;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::BitString;
use crate::bpmac::{BpMac, BpMacKeys};
use crate::frame::ID_BITS;
use crate::node::authenticator::MAX_MESSAGE_BITS;
use crate::secoc::{integrity_tag, GroupKey, TagWidth};

pub use injector::{GuessMode, InjectionStrategy, Injector, InjectorConfig};
pub use jammer::Jammer;
pub use modifier::{BitModifier, BitModifierConfig};

/// What an attacker knows and can physically do.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerCapabilities {
    #[serde(default)]
    pub knows_group_key: bool,
    #[serde(default)]
    pub knows_source_keys: BTreeSet<u16>,
    #[serde(default)]
    pub is_authenticator: bool,
    #[serde(default)]
    pub can_jam: bool,
    #[serde(default)]
    pub can_overwrite_bits: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CapabilityError {
    #[error("an attacker cannot be both the authenticator and a compromised ECU")]
    Collusion,
}

impl AttackerCapabilities {
    /// A compromised ECU knows the group key; a compromised authenticator
    /// never does.
    pub fn validate(&self) -> Result<(), CapabilityError> {
        if self.is_authenticator && self.knows_group_key {
            return Err(CapabilityError::Collusion);
        }
        Ok(())
    }

    /// Whether the attacker holds the source key of `can_id`.
    pub fn holds_source_key(&self, can_id: u16) -> bool {
        self.is_authenticator || self.knows_source_keys.contains(&can_id)
    }
}

/// Outcome of a forgery experiment against its binomial expectation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgeryReport {
    pub trials: u64,
    pub successes: u64,
    pub tag_width: u8,
    pub empirical_rate: f64,
    pub expected_rate: f64,
    /// Binomial standard deviation of the success count.
    pub sigma: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub within_band: bool,
}

impl ForgeryReport {
    pub fn new(trials: u64, successes: u64, tag_width: TagWidth) -> Self {
        let p = 0.5f64.powi(i32::from(tag_width.bits()));
        let n = trials as f64;
        let mean = n * p;
        let sigma = (n * p * (1.0 - p)).sqrt();
        let (band_low, band_high) = (mean - 3.0 * sigma, mean + 3.0 * sigma);
        let s = successes as f64;
        Self {
            trials,
            successes,
            tag_width: tag_width.bits(),
            empirical_rate: if trials == 0 { 0.0 } else { s / n },
            expected_rate: p,
            sigma,
            band_low,
            band_high,
            within_band: s >= band_low && s <= band_high,
        }
    }
}

/// Forgery game: each trial draws a fresh message and counter, computes the
/// aggregated tag a receiver would check, and compares a uniformly random
/// guess against it.
pub fn forgery_monte_carlo(tag_width: TagWidth, trials: u64, seed: u64) -> ForgeryReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group = GroupKey::new(rng.gen());
    let keys = loop {
        if let Ok(k) = BpMacKeys::new(rng.gen(), rng.gen()) {
            break k;
        }
    };
    let mut mac = BpMac::new(keys, MAX_MESSAGE_BITS).expect("table for 47 bits");
    let mut successes = 0;
    for counter in 0..trials {
        let can_id: u16 = rng.gen_range(0..0x800);
        let app = BitString::from_uint(rng.gen::<u64>() & ((1 << 36) - 1), 36);
        let mut msg = BitString::from_uint(u64::from(can_id), ID_BITS);
        msg.extend_from(&app);
        let t_s = mac.tag(&msg, counter).expect("message fits the table");
        let t_i = integrity_tag(&group, can_id, &app, counter);
        let tag = tag_width.truncate(t_i ^ t_s);
        let guess = tag_width.truncate(rng.gen::<u32>() & 0xff_ffff);
        if guess == tag {
            successes += 1;
        }
    }
    ForgeryReport::new(trials, successes, tag_width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collusion_is_rejected() {
        let caps = AttackerCapabilities {
            knows_group_key: true,
            is_authenticator: true,
            ..Default::default()
        };
        assert_eq!(caps.validate(), Err(CapabilityError::Collusion));
    }

    #[test]
    fn report_band() {
        let r = ForgeryReport::new(100_000, 391, TagWidth::new(8).unwrap());
        assert!((r.sigma - 19.73).abs() < 0.01);
        assert!((r.band_high - r.band_low - 118.4).abs() < 0.1);
        assert!(r.within_band);
        assert!(!ForgeryReport::new(100_000, 500, TagWidth::new(8).unwrap()).within_band);
    }

    #[test]
    fn coin_flip_width() {
        let r = forgery_monte_carlo(TagWidth::new(1).unwrap(), 10_000, 3);
        assert!((r.empirical_rate - 0.5).abs() < 0.03);
    }
}
