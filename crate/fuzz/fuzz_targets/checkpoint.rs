#![no_main]

use libfuzzer_sys::fuzz_target;
use sa2sr::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok((params, meta)) = checkpoint::decode(data) {
        let bytes = checkpoint::encode(&params, &meta);
        let (p2, m2) = checkpoint::decode(&bytes).expect("re-encoded checkpoint must decode");
        assert_eq!(m2, meta);
        assert_eq!(p2.len(), params.len());
    }
});
