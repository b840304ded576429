#![no_main]

use libfuzzer_sys::fuzz_target;
use snewt::experiment::parse_config_str;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse_config_str(text) {
        let again = parse_config_str(&cfg.to_string()).expect("serialized config parses");
        assert_eq!(again, cfg);
    }
});
