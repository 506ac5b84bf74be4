#![no_main]

use libfuzzer_sys::fuzz_target;
use textguided::embeddings::{read_binary, read_text};

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = read_text(data) {
        let mut bytes = Vec::new();
        table.write_binary_to(&mut bytes).unwrap();
        let back = read_binary(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), table.len());
    }
});
