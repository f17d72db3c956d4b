#![no_main]

use libfuzzer_sys::fuzz_target;
use motic::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        assert_eq!(c.to_bytes(), data);
    }
});
