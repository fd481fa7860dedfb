#![no_main]

use libfuzzer_sys::fuzz_target;
use spikegrad::data::Checkpoint;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(bytes) {
        let encoded = ckpt.encode().unwrap();
        let again = Checkpoint::decode(&encoded).unwrap();
        assert_eq!(again.encode().unwrap(), encoded);
    }
});
