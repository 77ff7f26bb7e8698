#![no_main]

use libfuzzer_sys::fuzz_target;
use mosaic::protocol::{decode, encode, ServerCommand};

fuzz_target!(|data: &[u8]| {
    if let Ok(cmd) = decode::<ServerCommand>(data) {
        assert_eq!(decode::<ServerCommand>(&encode(&cmd)).unwrap(), cmd);
    }
});
