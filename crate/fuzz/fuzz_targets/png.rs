#![no_main]

use libfuzzer_sys::fuzz_target;
use uapath::data::decode_png;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png(data) {
        let (h, w, c) = img.shape();
        assert_eq!(img.pixels.len(), h * w * c);
    }
});
