#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use uapath::data::decode_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = decode_manifest(data, Path::new("fuzz.csv")) {
        for r in &rows {
            assert!(!r.id.is_empty() && !r.path.is_empty());
        }
    }
});
