#![no_main]

use libfuzzer_sys::fuzz_target;
use mvi::data::parse_split_indices;

fuzz_target!(|data: &[u8]| {
    let Some((&n, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let n = usize::from(n);
    if let Ok(splits) = parse_split_indices(text, n) {
        for s in splits {
            assert!(s.train.iter().chain(&s.test).all(|&i| i < n));
        }
    }
});
