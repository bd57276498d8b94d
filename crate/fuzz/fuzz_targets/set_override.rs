#![no_main]

use libfuzzer_sys::fuzz_target;
use mink_cli::config::parse_override;
use mink_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_override(spec);
    let _ = RunConfig::from_toml("", &[spec.to_string()]);
});
