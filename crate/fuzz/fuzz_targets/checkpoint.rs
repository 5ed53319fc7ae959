#![no_main]

use libfuzzer_sys::fuzz_target;
use uapath::model::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    // anything that decodes must survive a re-encode unchanged
    if let Ok(ckpt) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ckpt);
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(encode_checkpoint(&again), bytes);
    }
});
