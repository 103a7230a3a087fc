#![no_main]

use libfuzzer_sys::fuzz_target;
use ragnet::trainer::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // Anything accepted must re-encode to a form that decodes the same.
        let again = Checkpoint::decode(&ck.encode()).expect("re-encoded checkpoint");
        assert_eq!(again.tensors.len(), ck.tensors.len());
    }
});
