#![no_main]

use libfuzzer_sys::fuzz_target;
use snewt::experiment::{parse_aggregate_csv, parse_summary_csv, write_aggregate_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = parse_aggregate_csv(text) {
        let out = write_aggregate_csv(&rows).expect("rows serialize");
        let again = parse_aggregate_csv(&out).expect("serialized rows parse");
        assert_eq!(again.len(), rows.len());
    }
    let _ = parse_summary_csv(text);
});
