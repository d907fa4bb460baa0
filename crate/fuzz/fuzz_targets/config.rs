#![no_main]

use htdg_cli::FileConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = FileConfig::parse(text) {
            let _ = cfg.train_config(0).validate();
            let _ = cfg.score_options();
        }
    }
});
