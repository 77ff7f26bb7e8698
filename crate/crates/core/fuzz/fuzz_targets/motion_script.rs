#![no_main]

use libfuzzer_sys::fuzz_target;
use mosaic::tracking::MotionScript;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(script) = MotionScript::from_json(text) {
        for t in [0, 1, 999, 60_000, u64::MAX / 2] {
            let _ = script.frame_at(t);
        }
    }
});
