#![no_main]

use libfuzzer_sys::fuzz_target;
use sd2::bench::ExperimentMatrix;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = serde_json::from_slice::<ExperimentMatrix>(data) {
        let _ = m.validate();
        let _ = m.config_hash();
    }
});
