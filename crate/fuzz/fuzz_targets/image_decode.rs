#![no_main]

use libfuzzer_sys::fuzz_target;
use mtnet::data::busi::decode_image;

fuzz_target!(|data: &[u8]| {
    if let Ok(pixels) = decode_image(data, 16) {
        assert_eq!(pixels.len(), 256);
        assert!(pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
