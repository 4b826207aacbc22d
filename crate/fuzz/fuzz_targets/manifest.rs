#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use sa2sr::workbench::manifest::{parse_manifest, Requirement};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        for req in [Requirement::Pretrain, Requirement::Finetune, Requirement::Any] {
            let _ = parse_manifest(text, Path::new("/corpus"), req);
        }
    }
});
