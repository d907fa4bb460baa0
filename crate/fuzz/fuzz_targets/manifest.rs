#![no_main]

use htdg::checkpoint::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_manifest(text) {
            assert_eq!(m.sigmas.len(), m.meta.sizes.len());
        }
    }
});
