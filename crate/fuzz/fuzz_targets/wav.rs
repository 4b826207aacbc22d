#![no_main]

use libfuzzer_sys::fuzz_target;
use sa2sr::frontend::wav::{read_wav_bytes, write_wav_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(wave) = read_wav_bytes(data) {
        if let Ok(bytes) = write_wav_bytes(&wave) {
            let again = read_wav_bytes(&bytes).expect("re-encoded wav must decode");
            assert_eq!(again.sample_rate(), wave.sample_rate());
        }
    }
});
