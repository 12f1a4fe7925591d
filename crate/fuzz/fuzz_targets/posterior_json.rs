#![no_main]

use libfuzzer_sys::fuzz_target;
use mvi::experiments::FittedPosterior;

fuzz_target!(|data: &[u8]| {
    if let Ok(fitted) = serde_json::from_slice::<FittedPosterior>(data) {
        let _ = fitted.sidecar_bytes();
        let _ = fitted.model();
    }
});
