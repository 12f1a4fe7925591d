#![no_main]

use libfuzzer_sys::fuzz_target;
use mvi::experiments::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_text(text) {
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_text(&json).unwrap(), cfg);
    }
});
