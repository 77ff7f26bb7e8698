#![no_main]

use libfuzzer_sys::fuzz_target;
use mosaic::server::replay;

fuzz_target!(|data: &[u8]| {
    let _ = replay(data);
});
