#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(text) = std::str::from_utf8(bytes) {
        let mut cfg = awan::config::RunConfig::default();
        if cfg.apply_text(text).is_ok() {
            let _ = cfg.validate();
        }
    }
});
