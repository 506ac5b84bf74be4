#![no_main]

use libfuzzer_sys::fuzz_target;
use textguided::video::VideoClip;

fuzz_target!(|data: &[u8]| {
    if let Ok(clip) = VideoClip::decode(data) {
        let bytes = clip.encode();
        assert_eq!(VideoClip::decode(&bytes).unwrap().encode(), bytes);
    }
});
