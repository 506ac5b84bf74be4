#![no_main]

use libfuzzer_sys::fuzz_target;
use textguided::embeddings::read_binary;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = read_binary(data) {
        let mut bytes = Vec::new();
        table.write_binary_to(&mut bytes).unwrap();
        let mut again = Vec::new();
        read_binary(bytes.as_slice()).unwrap().write_binary_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }
});
