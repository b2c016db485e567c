#![no_main]

use libfuzzer_sys::fuzz_target;
use unetrpp_core::io::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode();
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.config, ckpt.config);
        assert_eq!(again.entries.len(), ckpt.entries.len());
        for (a, b) in again.entries.iter().zip(&ckpt.entries) {
            assert_eq!((&a.name, &a.shape), (&b.name, &b.shape));
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // Any truncation must be rejected.
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    }
});
