#![no_main]

use libfuzzer_sys::fuzz_target;
use ragnet_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let back = RunConfig::parse(&cfg.to_text()).expect("printed config parses");
        assert_eq!(back.to_text(), cfg.to_text());
    }
});
