#![no_main]

use libfuzzer_sys::fuzz_target;
use motic::prototypes::PrototypeBank;

fuzz_target!(|data: &[u8]| {
    if let Ok(bank) = PrototypeBank::from_bytes(data) {
        let again = PrototypeBank::from_bytes(&bank.to_bytes()).expect("re-encoded bank decodes");
        assert_eq!(again, bank);
    }
});
