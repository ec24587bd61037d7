#![no_main]

use evsched::Scenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = Scenario::from_json_str(text) {
        let out = s.to_json_string();
        let back = Scenario::from_json_str(&out).expect("serialized scenario parses");
        assert_eq!(back.to_json_string(), out);
    }
});
