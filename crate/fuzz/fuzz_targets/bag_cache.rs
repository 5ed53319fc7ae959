#![no_main]

use libfuzzer_sys::fuzz_target;
use uapath::mil::{decode_bag, encode_bag};

fuzz_target!(|data: &[u8]| {
    if let Ok(bag) = decode_bag(data) {
        let bytes = encode_bag(&bag);
        assert_eq!(encode_bag(&decode_bag(&bytes).unwrap()), bytes);
    }
});
