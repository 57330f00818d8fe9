#![no_main]

use libfuzzer_sys::fuzz_target;
use sd2::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ck.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), ck.encode());
    }
});
