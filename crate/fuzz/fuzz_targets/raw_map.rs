#![no_main]

use htdg::scorer::{decode_raw_map, encode_raw_map};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = decode_raw_map(data) {
        assert_eq!(map.values.len(), map.height * map.width);
        let again = decode_raw_map(&encode_raw_map(&map)).expect("re-encoded map decodes");
        assert_eq!(again.values.len(), map.values.len());
    }
});
