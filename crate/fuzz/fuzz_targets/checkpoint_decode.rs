#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(ckpt) = awan::checkpoint::decode(bytes) {
        let _ = ckpt.restore();
    }
});
