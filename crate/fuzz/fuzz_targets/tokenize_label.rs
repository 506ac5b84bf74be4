#![no_main]

use libfuzzer_sys::fuzz_target;
use textguided::relevance::{parse_labels, tokenize_label};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(phrase) = tokenize_label(text) {
        assert!(!phrase.tokens().is_empty());
        assert!(phrase.tokens().iter().all(|t| !t.is_empty() && !t.contains([' ', '_'])));
    }
    let _ = parse_labels(text.lines());
});
