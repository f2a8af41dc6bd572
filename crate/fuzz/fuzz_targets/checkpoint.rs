#![no_main]

use libfuzzer_sys::fuzz_target;
use pgcam_core::models::{Checkpoint, Model};

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = Checkpoint::decode(data) else { return };
    // Anything that decodes must re-encode to an equal checkpoint.
    let bytes = ckpt.encode().expect("decoded checkpoint encodes");
    assert_eq!(Checkpoint::decode(&bytes).expect("re-decode"), ckpt);
    // Model reconstruction may reject, but must not panic.
    let _ = Model::<f32>::from_checkpoint(&ckpt);
});
