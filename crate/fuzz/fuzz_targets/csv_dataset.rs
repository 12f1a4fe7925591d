#![no_main]

use libfuzzer_sys::fuzz_target;
use mvi::data::{parse_csv_dataset, CsvSchema};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_csv_dataset(data, &CsvSchema::default()) {
        assert_eq!(ds.inputs.nrows(), ds.targets.nrows());
        assert!(ds.inputs.iter().all(|v| v.is_finite()));
    }
});
