use caiba::bits::BitString;
use caiba::bpmac::{BlindingCache, BpMac, BpMacKeys};
use caiba::bus::{resolve_level, DriveLevel, WireLevel};
use caiba::frame::{crc15, decode_frame, destuff_bits, encode_frame, stuff_bits, Frame, STUFF_RUN};
use caiba::reference;
use caiba::secoc::{integrity_tag, reconstruct_counter, verify, FreshnessState, GroupKey, TagWidth, Verdict};
use proptest::prelude::*;

fn bits(max: usize) -> impl Strategy<Value = BitString> {
    prop::collection::vec(any::<bool>(), 0..=max).prop_map(BitString::from_bits)
}

fn plain_frame() -> impl Strategy<Value = Frame> {
    (0u16..0x800, prop::collection::vec(any::<u8>(), 0..=8)).prop_map(|(id, data)| Frame::plain(id, &data).unwrap())
}

fn secured_frame() -> impl Strategy<Value = Frame> {
    (0u16..0x800, 4u8..=8, any::<u64>(), 0u8..16, 0u32..0x100_0000).prop_map(|(id, dlc, raw, lsb, tag)| {
        let n = 8 * usize::from(dlc) - 28;
        let app = BitString::from_uint(raw & ((1u64 << n) - 1), n);
        Frame::secured(id, dlc, app, lsb, tag).unwrap()
    })
}

fn keys() -> impl Strategy<Value = BpMacKeys> {
    (any::<[u8; 16]>(), any::<[u8; 16]>()).prop_filter_map("distinct keys", |(a, b)| BpMacKeys::new(a, b).ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn codec_round_trip(f in prop_oneof![plain_frame(), secured_frame()]) {
        let enc = encode_frame(&f, None).unwrap();
        prop_assert_eq!(decode_frame(&enc.stuffed, f.secured).unwrap(), f);
    }

    #[test]
    fn online_equals_batch(k in keys(), msg in bits(47), counter in any::<u64>()) {
        let mut mac = BpMac::new(k.clone(), 47).unwrap();
        let batch = mac.tag(&msg, counter).unwrap();
        let mut online = mac.online();
        for b in msg.iter() {
            online.feed_bit(b).unwrap();
        }
        online.set_nonce(counter);
        prop_assert_eq!(online.finalize(&mut BlindingCache::new(&k)).unwrap(), batch);
        prop_assert!(online.xor_count() <= msg.len() as u64 + 1);
    }
}

proptest! {
    #[test]
    fn stuffing_round_trip_and_run_limit(b in bits(120)) {
        let (stuffed, positions) = stuff_bits(&b);
        prop_assert_eq!(destuff_bits(&stuffed).unwrap(), b);
        prop_assert_eq!(stuffed.len(), b_len_plus(&positions, &stuffed));
        let mut run = 0;
        let mut last = None;
        for x in stuffed.iter() {
            run = if Some(x) == last { run + 1 } else { 1 };
            last = Some(x);
            prop_assert!(run <= STUFF_RUN);
        }
    }

    #[test]
    fn crc_is_linear(pairs in prop::collection::vec(any::<(bool, bool)>(), 0..100)) {
        let a: BitString = pairs.iter().map(|p| p.0).collect();
        let b: BitString = pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(crc15(&a.xor(&b)), crc15(&a) ^ crc15(&b));
    }

    #[test]
    fn crc_matches_long_division(b in bits(200)) {
        prop_assert_eq!(crc15(&b), reference::crc15_long_division(&b));
    }

    #[test]
    fn counter_reconstruction_within_window(last in 0u64..u64::MAX - 32, delta in 1u64..=16) {
        let next = last + delta;
        prop_assert_eq!(reconstruct_counter(last, (next & 0xf) as u8), next);
    }

    #[test]
    fn bpmac_matches_definition(k in keys(), msg in bits(47), counter in any::<u64>()) {
        let mut mac = BpMac::new(k.clone(), 47).unwrap();
        prop_assert_eq!(mac.tag(&msg, counter).unwrap(), reference::bpmac(&k, 47, &msg, counter));
    }

    #[test]
    fn bpmac_difference_is_bitflips(k in keys(), pairs in prop::collection::vec(any::<(bool, bool)>(), 0..=47), counter in any::<u64>()) {
        let a: BitString = pairs.iter().map(|p| p.0).collect();
        let b: BitString = pairs.iter().map(|p| p.1).collect();
        let table = caiba::bpmac::derive_table(&k, 47).unwrap();
        let ta = caiba::bpmac::tag_batch(&table, &k, &a, counter).unwrap();
        let tb = caiba::bpmac::tag_batch(&table, &k, &b, counter).unwrap();
        let expect = a.xor(&b).iter().enumerate().filter(|(_, d)| *d).fold(0, |acc, (i, _)| acc ^ table.bitflip[i]);
        prop_assert_eq!(ta ^ tb, expect);
    }

    #[test]
    fn cmac_matches_literal(key in any::<[u8; 16]>(), msg in prop::collection::vec(any::<u8>(), 0..70)) {
        prop_assert_eq!(caiba::cmac::Cmac::new(&key).mac(&msg), reference::cmac(&key, &msg));
    }

    #[test]
    fn wired_and_without_erase(drives in prop::collection::vec(any::<bool>(), 1..8)) {
        let levels = drives.iter().map(|&d| DriveLevel::for_bit(d));
        let expected = WireLevel::from_bit(drives.iter().all(|&d| d));
        prop_assert_eq!(resolve_level(levels).level, expected);
    }

    #[test]
    fn erase_always_wins(drives in prop::collection::vec(any::<bool>(), 0..8)) {
        let levels = drives.iter().map(|&d| DriveLevel::for_bit(d)).chain([DriveLevel::Erase]);
        prop_assert_eq!(resolve_level(levels).level, WireLevel::Recessive);
    }

    #[test]
    fn verify_accepts_only_the_genuine_frame(key in any::<[u8; 16]>(), raw in any::<u64>(), counter in 0u64..1 << 40, flip in 0usize..36, width in prop::sample::select(vec![8u8, 16, 24])) {
        let g = GroupKey::new(key);
        let w = TagWidth::new(width).unwrap();
        let app = BitString::from_uint(raw & ((1 << 36) - 1), 36);
        let tag = w.truncate(integrity_tag(&g, 0x123, &app, counter));
        let genuine = Frame::secured(0x123, 8, app.clone(), (counter & 0xf) as u8, tag).unwrap();
        let mut modified = genuine.clone();
        modified.app_data.set(flip, !app[flip]);
        let state = FreshnessState { last_accepted: counter.checked_sub(1), consecutive_failures: 0 };
        prop_assert_eq!(verify(&g, &genuine, &mut state.clone(), w), Verdict::Accept { counter });
        // A modified frame passes only on a truncated-tag collision.
        if width == 24 {
            prop_assert!(!verify(&g, &modified, &mut state.clone(), w).is_accept());
        }
    }
}

fn b_len_plus(positions: &[usize], stuffed: &BitString) -> usize {
    destuff_bits(stuffed).unwrap().len() + positions.len()
}
