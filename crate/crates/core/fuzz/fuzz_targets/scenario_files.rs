#![no_main]

use libfuzzer_sys::fuzz_target;
use mosaic::simclient::{AssertionFile, Scenario};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = Scenario::from_json(text) {
        let _ = s.step_times();
        let _ = s.screens();
    }
    let _ = AssertionFile::from_json(text);
});
