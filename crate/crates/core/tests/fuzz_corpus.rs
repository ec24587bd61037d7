use std::fs;
use std::path::PathBuf;

use evsched::neural::Checkpoint;
use evsched::{Config, Scenario};

fn seeds(target: &str) -> Vec<(PathBuf, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let text = fs::read_to_string(&p).unwrap();
            (p, text)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn scenario_seeds_round_trip_or_reject() {
    let mut parsed = 0;
    for (path, text) in seeds("scenario_parse") {
        if let Ok(s) = Scenario::from_json_str(&text) {
            let out = s.to_json_string();
            assert_eq!(Scenario::from_json_str(&out).unwrap().to_json_string(), out, "{}", path.display());
            parsed += 1;
        }
    }
    assert!(parsed >= 3);
}

#[test]
fn checkpoint_seeds_round_trip_or_reject() {
    let mut parsed = 0;
    for (path, text) in seeds("checkpoint_parse") {
        if let Ok(c) = Checkpoint::from_json_str(&text) {
            let back = Checkpoint::from_json_str(&c.to_json_string()).unwrap();
            assert_eq!(back, c, "{}", path.display());
            parsed += 1;
        }
    }
    assert!(parsed >= 1);
}

#[test]
fn config_seeds_round_trip_or_reject() {
    let mut parsed = 0;
    for (path, text) in seeds("config_parse") {
        if let Ok(cfg) = Config::from_toml_str(&text) {
            assert_eq!(Config::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg, "{}", path.display());
            parsed += 1;
        }
    }
    assert!(parsed >= 3);
}

#[test]
fn truncated_inputs_never_panic() {
    for target in ["scenario_parse", "checkpoint_parse", "config_parse"] {
        for (_, text) in seeds(target) {
            for cut in (0..text.len()).step_by(97).filter(|&c| text.is_char_boundary(c)) {
                let t = &text[..cut];
                let _ = Scenario::from_json_str(t);
                let _ = Checkpoint::from_json_str(t);
                let _ = Config::from_toml_str(t);
            }
        }
    }
}
