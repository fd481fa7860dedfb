#![no_main]

use libfuzzer_sys::fuzz_target;
use spikegrad::data::{parse_idx_images, write_idx_images};

fuzz_target!(|bytes: &[u8]| {
    if let Ok(images) = parse_idx_images(bytes) {
        assert!(images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = parse_idx_images(&write_idx_images(&images).unwrap()).unwrap();
        assert_eq!(again.shape(), images.shape());
    }
});
