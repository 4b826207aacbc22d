#![no_main]

use libfuzzer_sys::fuzz_target;
use sa2sr::frontend::blob;

fuzz_target!(|data: &[u8]| {
    if let Ok(feats) = blob::decode(data) {
        let again = blob::decode(&blob::encode(&feats)).expect("re-encoded blob must decode");
        assert_eq!(again.mask(), feats.mask());
    }
});
