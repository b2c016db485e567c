#![no_main]

use libfuzzer_sys::fuzz_target;
use unetrpp_core::io::volume::{decode_payload, encode_payload};
use unetrpp_core::io::{ValueType, VolumeHeader};

// First four bytes pick the header (value type, extents, channels); the rest
// is the payload.
fuzz_target!(|data: &[u8]| {
    let [kind, h, w, d, payload @ ..] = data else {
        return;
    };
    let dim = |b: u8| usize::from(b % 8) + 1;
    let header = VolumeHeader {
        extents: [dim(*h), dim(*w), dim(*d)],
        channels: usize::from(kind >> 4 & 1) + 1,
        value_type: if kind & 1 == 0 { ValueType::F32 } else { ValueType::I32 },
        data_file: "v.raw".into(),
    };
    match decode_payload(&header, payload) {
        Ok(values) => {
            assert_eq!(payload.len(), header.payload_bytes().unwrap());
            assert_eq!(encode_payload(&values), payload);
        }
        Err(_) => assert_ne!(payload.len(), header.payload_bytes().unwrap()),
    }
});
