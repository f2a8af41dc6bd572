#![no_main]

use libfuzzer_sys::fuzz_target;
use pgcam_core::report::RunReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = RunReport::parse(text) {
        if let Ok(emitted) = report.emit() {
            assert_eq!(RunReport::parse(&emitted).expect("emitted report parses"), report);
        }
    }
});
