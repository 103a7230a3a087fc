#![no_main]

use libfuzzer_sys::fuzz_target;
use ragnet::trainer::LogRow;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for line in text.lines() {
        if let Ok(row) = LogRow::parse_csv(line) {
            let again = LogRow::parse_csv(&row.to_csv()).expect("printed row parses");
            assert_eq!(again.iter, row.iter);
        }
    }
});
