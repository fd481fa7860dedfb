#![no_main]

use libfuzzer_sys::fuzz_target;
use spikegrad::data::{parse_idx_labels, write_idx_labels};

fuzz_target!(|bytes: &[u8]| {
    if let Ok(labels) = parse_idx_labels(bytes) {
        assert_eq!(parse_idx_labels(&write_idx_labels(&labels).unwrap()).unwrap(), labels);
    }
});
