#![no_main]

use libfuzzer_sys::fuzz_target;
use mosaic::protocol::LineFramer;

// The first byte picks a chunk size; the rest is the stream.
fuzz_target!(|data: &[u8]| {
    let Some((&step, stream)) = data.split_first() else { return };
    let step = usize::from(step).max(1);
    let mut whole = LineFramer::new(64);
    whole.feed(stream);
    let mut expected = Vec::new();
    while let Some(line) = whole.next_line() {
        expected.push(line.ok());
    }
    let mut chunked = LineFramer::new(64);
    let mut got = Vec::new();
    for chunk in stream.chunks(step) {
        chunked.feed(chunk);
        while let Some(line) = chunked.next_line() {
            got.push(line.ok());
        }
    }
    assert_eq!(expected.iter().flatten().collect::<Vec<_>>(), got.iter().flatten().collect::<Vec<_>>());
});
