#![no_main]

use libfuzzer_sys::fuzz_target;
use ragnet::Tensor;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = Tensor::<f64>::from_text(text);
    }
});
