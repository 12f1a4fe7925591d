#![no_main]

use libfuzzer_sys::fuzz_target;
use mvi::experiments::sidecar;

fuzz_target!(|data: &[u8]| {
    if let Ok(mats) = sidecar::decode(data) {
        let refs: Vec<(&str, &_)> = mats.iter().map(|(n, m)| (n.as_str(), m)).collect();
        assert_eq!(sidecar::encode(&refs), data);
    }
});
