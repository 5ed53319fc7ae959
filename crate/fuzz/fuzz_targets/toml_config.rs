#![no_main]

use libfuzzer_sys::fuzz_target;
use uapath_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = RunConfig::parse_str(text);
    }
});
