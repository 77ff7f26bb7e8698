#![no_main]

use libfuzzer_sys::fuzz_target;
use mosaic::protocol::{decode, encode, DeviceMessage};

fuzz_target!(|data: &[u8]| {
    if let Ok(msg) = decode::<DeviceMessage>(data) {
        assert_eq!(decode::<DeviceMessage>(&encode(&msg)).unwrap(), msg);
    }
});
