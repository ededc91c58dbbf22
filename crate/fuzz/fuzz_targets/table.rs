#![no_main]

use libfuzzer_sys::fuzz_target;
use mssfs::io::Table;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Table::read(data) {
        for i in 0..t.rows.len() {
            let _ = t.number(i, "estimate");
        }
    }
});
