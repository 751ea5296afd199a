#![no_main]

use libfuzzer_sys::fuzz_target;
use lincollapse::formats::{filter_set_text, parse_filter_set};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = parse_filter_set(text) {
        assert_eq!(parse_filter_set(&filter_set_text(&set)).unwrap(), set);
    }
});
