#![no_main]

use htdg::imgpipe::decode_image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Small target keeps the resampling cheap; the decoder is what is under test.
    if let Ok(img) = decode_image(data, 1, 16) {
        assert!(img.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let _ = decode_image(data, 3, 16);
});
