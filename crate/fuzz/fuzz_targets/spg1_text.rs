#![no_main]

use libfuzzer_sys::fuzz_target;
use mink_core::io::{encode_points, parse_points_text, points_to_text};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cloud) = parse_points_text(text) {
        let again = parse_points_text(&points_to_text(&cloud)).expect("printed cloud parses");
        assert_eq!(encode_points(&again), encode_points(&cloud));
    }
});
