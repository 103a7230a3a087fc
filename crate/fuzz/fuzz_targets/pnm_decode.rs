#![no_main]

use libfuzzer_sys::fuzz_target;
use ragnet::image::decode_pnm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pnm::<f32>(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
