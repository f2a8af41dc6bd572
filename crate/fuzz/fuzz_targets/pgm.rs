#![no_main]

use libfuzzer_sys::fuzz_target;
use pgcam_core::phantom::{decode_pgm, encode_pgm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        assert_eq!(img.pixels.len(), img.width * img.height);
        assert_eq!(decode_pgm(&encode_pgm(&img)).expect("round trip"), img);
    }
});
