#![no_main]

use libfuzzer_sys::fuzz_target;
use unetrpp_core::io::VolumeHeader;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(header) = VolumeHeader::parse(text) {
        assert!(header.payload_bytes().is_some());
        assert_eq!(VolumeHeader::parse(&header.to_text()).unwrap(), header);
    }
});
