#![no_main]

use libfuzzer_sys::fuzz_target;
use mink_core::KernelMap;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(map) = KernelMap::parse_text(text) {
        let printed = map.to_text();
        let again = KernelMap::parse_text(&printed).expect("printed map parses");
        assert_eq!(again.to_text(), printed);
    }
});
