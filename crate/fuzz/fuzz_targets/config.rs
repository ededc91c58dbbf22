#![no_main]

use libfuzzer_sys::fuzz_target;
use mssfs::io::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = RunConfig::parse(text) {
            if c.validate().is_ok() {
                let _ = c.model(2);
                let _ = c.model(0);
            }
        }
    }
});
