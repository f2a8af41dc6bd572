#![no_main]

use libfuzzer_sys::fuzz_target;
use pgcam_core::cam::{decode_pgsm, encode_pgsm};

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = decode_pgsm(data) {
        let again = decode_pgsm(&encode_pgsm(&map)).expect("round trip");
        assert_eq!(again.values().len(), map.values().len());
        for (a, b) in again.values().iter().zip(map.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
});
