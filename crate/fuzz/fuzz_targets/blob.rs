#![no_main]

use htdg::checkpoint::{decode_blob, encode_blob};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(values) = decode_blob(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(encode_blob(&values), data);
    }
});
