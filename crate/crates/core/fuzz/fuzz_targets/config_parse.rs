#![no_main]

use evsched::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::from_toml_str(text) {
        assert_eq!(Config::from_toml_str(&cfg.to_toml_string()).expect("serialized config parses"), cfg);
    }
});
