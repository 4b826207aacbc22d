#![no_main]

use libfuzzer_sys::fuzz_target;
use sa2sr::trainer::Mode;
use sa2sr::workbench::config::RunSettings;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let mut s = RunSettings::defaults(Mode::Finetune);
        if s.apply_text(text).is_ok() {
            let mut again = RunSettings::defaults(Mode::Finetune);
            again.apply_text(&s.to_config_text()).expect("echoed config must parse");
            assert_eq!(again.to_config_text(), s.to_config_text());
        }
    }
});
