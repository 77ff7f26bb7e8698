#![no_main]

use libfuzzer_sys::fuzz_target;
use mosaic::protocol::{decode, encode, TrackingMessage};

fuzz_target!(|data: &[u8]| {
    if let Ok(msg) = decode::<TrackingMessage>(data) {
        assert_eq!(decode::<TrackingMessage>(&encode(&msg)).unwrap(), msg);
    }
});
