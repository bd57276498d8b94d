#![no_main]

use libfuzzer_sys::fuzz_target;
use mink_core::io::{decode_points, encode_points};

fuzz_target!(|data: &[u8]| {
    if let Ok(cloud) = decode_points(data) {
        // Compared as bytes so NaN payloads survive the check.
        let bytes = encode_points(&cloud);
        let again = decode_points(&bytes).expect("re-encoded cloud decodes");
        assert_eq!(encode_points(&again), bytes);
    }
});
