#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use lincollapse::formats::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Some((&fields, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let fields = usize::from(fields % 4) + 1;
    if let Ok(entries) = parse_manifest(text, Path::new("base"), fields) {
        assert!(entries.iter().all(|e| e.len() == fields));
    }
});
