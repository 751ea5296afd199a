#![no_main]

use libfuzzer_sys::fuzz_target;
use lincollapse::formats::{read_pgm, write_pgm};

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = read_pgm(data) {
        // decoded samples are integers within range, so re-encoding is lossless
        assert_eq!(read_pgm(&write_pgm(&p)).unwrap(), p);
    }
});
