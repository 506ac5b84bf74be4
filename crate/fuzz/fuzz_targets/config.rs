#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use textguided::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text, Path::new("/base")) {
        let echoed = cfg.to_text();
        let again = RunConfig::parse(&echoed, Path::new("/base")).unwrap();
        assert_eq!(again.to_text(), echoed);
    }
});
