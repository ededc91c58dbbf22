#![no_main]

use libfuzzer_sys::fuzz_target;
use mssfs::template::Slot;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(slot) = text.parse::<Slot>() {
            let back: Slot = slot.to_string().parse().expect("display round trips");
            assert_eq!(back, slot);
        }
    }
});
