#![no_main]

use libfuzzer_sys::fuzz_target;
use mssfs::io::{read_dataset, write_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = read_dataset(data) {
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).expect("a parsed dataset writes back");
        let again = read_dataset(buf.as_slice()).expect("written dataset reads back");
        assert_eq!(again.len(), d.len());
    }
});
