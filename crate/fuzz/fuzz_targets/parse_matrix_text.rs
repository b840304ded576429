#![no_main]

use libfuzzer_sys::fuzz_target;
use snewt::oracle::{parse_matrix_text, parse_named_matrices, write_matrix_text};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = parse_matrix_text(text) {
        let again = parse_matrix_text(&write_matrix_text(&m)).expect("written matrix parses");
        assert_eq!(again.shape(), m.shape());
    }
    let _ = parse_named_matrices(text);
});
