#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(t) = awan::data::decode_cube(bytes) {
        let again = awan::data::encode_cube(&t).expect("decoded cube re-encodes");
        assert_eq!(again.as_slice(), bytes);
    }
});
