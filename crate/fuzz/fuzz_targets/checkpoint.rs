#![no_main]

use libfuzzer_sys::fuzz_target;
use textguided::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode(data) {
        let again = decode(&encode(&params)).unwrap();
        assert_eq!(encode(&again), encode(&params));
    }
});
