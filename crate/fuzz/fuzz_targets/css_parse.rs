#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(text) = std::str::from_utf8(bytes) {
        if let Ok(css) = awan::data::parse_css(text) {
            assert_eq!(css.matrix().shape()[0], 3);
        }
    }
});
