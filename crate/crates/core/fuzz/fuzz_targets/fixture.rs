#![no_main]

use libfuzzer_sys::fuzz_target;
use mosaic::store::Fixture;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(f) = Fixture::from_json(text) {
        let _ = f.all_relations();
    }
});
