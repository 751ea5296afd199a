#![no_main]

use libfuzzer_sys::fuzz_target;
use lincollapse::formats::{Model, ModelFile};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = ModelFile::parse(text) {
        let canonical = file.to_text();
        let again = ModelFile::parse(&canonical).expect("canonical text parses");
        assert_eq!(again, file);
        assert_eq!(again.to_text(), canonical);
        let _ = Model::from_file(file);
    }
});
