#![no_main]

use libfuzzer_sys::fuzz_target;
use pgcam_core::localizer::{format_boxes, parse_boxes};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(dets) = parse_boxes(text) {
        assert_eq!(parse_boxes(&format_boxes(&dets)).expect("formatted boxes parse"), dets);
    }
});
