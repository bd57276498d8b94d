#![no_main]

use libfuzzer_sys::fuzz_target;
use mink_core::autograd::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(blobs) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&blobs);
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(encode_checkpoint(&again), bytes);
    }
});
