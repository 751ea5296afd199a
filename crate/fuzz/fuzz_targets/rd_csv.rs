#![no_main]

use libfuzzer_sys::fuzz_target;
use lincollapse::formats::{parse_rd_csv, rd_csv};
use lincollapse::metrics::bd_rate;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(curve) = parse_rd_csv(text) {
        assert_eq!(parse_rd_csv(&rd_csv(&curve)).unwrap(), curve);
        let _ = bd_rate(&curve, &curve);
    }
});
