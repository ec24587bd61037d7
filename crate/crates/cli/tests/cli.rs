use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn evsched(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evsched")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = evsched(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    evsched(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &TempDir, kind: &str, extra: &[&str]) -> PathBuf {
    let path = dir.path().join(format!("{}.json", kind.replace(['(', ')', ','], "_")));
    let mut args = vec!["generate", kind, "--out", s(&path)];
    args.extend_from_slice(extra);
    ok(&args);
    path
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

fn mean_row<'a>(table: &'a str) -> Vec<&'a str> {
    table.lines().find(|l| l.split(',').nth(2) == Some("mean")).unwrap().split(',').collect()
}

#[test]
fn synthetic_rates_match_the_arterial_demand() {
    let dir = TempDir::new().unwrap();
    let path = generate(&dir, "synthetic6x6", &[]);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let flows = doc["flows"].as_array().unwrap();
    let (mut ew, mut ns) = (0, 0);
    for f in flows {
        match f["entry"].as_str().unwrap() {
            "west" | "east" => ew += 1,
            _ => ns += 1,
        }
        assert!(f["depart_time_s"].as_u64().unwrap() < 3600);
    }
    assert_eq!((ew, ns), (3 * 300, 3 * 90));
    assert_eq!(flows.len() as f64 / 12.0, 97.5);
}

#[test]
fn single_intersection_grid_has_no_flows() {
    let dir = TempDir::new().unwrap();
    let path = generate(&dir, "grid(1,1)", &[]);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert!(doc["flows"].as_array().unwrap().is_empty());

    let out = dir.path().join("eval");
    let table = ok(&["eval", "--scenario", s(&path), "--policy", "fixedtime", "--out", s(&out)]);
    let row: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[4..10], &["", "", "0", "0", "0", "0"]);
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap(), table);
    assert!(out.join("config.toml").exists());
}

#[test]
fn zero_episodes_writes_initial_checkpoint_and_reruns_are_identical() {
    let dir = TempDir::new().unwrap();
    let scen = generate(&dir, "grid(2,2)", &["--horizon", "200"]);
    let zero = write_config(&dir, "zero.toml", "episodes = 0\n");
    let out0 = dir.path().join("t0");
    ok(&["train", "--scenario", s(&scen), "--config", s(&zero), "--out", s(&out0)]);
    assert!(out0.join("checkpoint.json").exists());
    assert_eq!(fs::read_to_string(out0.join("curve.csv")).unwrap().lines().count(), 1);

    let short = write_config(&dir, "short.toml", "episodes = 3\nepisode_length_s = 200\nbatch_size = 4\n");
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["train", "--scenario", s(&scen), "--config", s(&short), "--seed", "7", "--out", s(&out)]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["curve.csv", "checkpoint.json", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(a.join("curve.csv")).unwrap().lines().count(), 4);
    assert!(fs::read_to_string(a.join("config.toml")).unwrap().contains("seed = 7"));

    let eval = dir.path().join("e");
    let table = ok(&[
        "eval", "--scenario", s(&scen), "--policy", "levid-dy", "--checkpoint", s(&a.join("checkpoint.json")),
        "--seeds", "1,2,3,4,5", "--ev-share", "0.2", "--config", s(&short), "--out", s(&eval),
    ]);
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(labels, ["1", "2", "3", "4", "5", "mean", "std"]);
}

#[test]
fn greenwave_beats_fixed_time_for_evs() {
    let dir = TempDir::new().unwrap();
    let scen = generate(&dir, "synthetic6x6", &[]);
    let ev_mean = |policy: &str| {
        let table = ok(&[
            "eval", "--scenario", s(&scen), "--policy", policy, "--ev-share", "0.01", "--seeds", "101,102,103,104,105",
            "--out", s(&dir.path().join(policy)),
        ]);
        mean_row(&table)[5].parse::<f64>().unwrap()
    };
    let (gw, ft) = (ev_mean("greenwave"), ev_mean("fixedtime"));
    assert!(gw < ft, "greenwave {gw} vs fixedtime {ft}");
}

#[test]
fn spacetime_exports_trajectory_and_route_phase_bands() {
    let dir = TempDir::new().unwrap();
    let scen = generate(&dir, "greenwave-tradeoff", &["--horizon", "600"]);
    let out = dir.path().join("st");
    ok(&["spacetime", "--scenario", s(&scen), "--policy", "greenwave", "--ev", "5", "--out", s(&out)]);

    let traj: Vec<(u32, f64)> = fs::read_to_string(out.join("trajectory.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (t, d) = l.split_once(',').unwrap();
            (t.parse().unwrap(), d.parse().unwrap())
        })
        .collect();
    assert!(traj.len() > 2);
    assert!(traj.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 >= w[0].1));
    // Preempted greens leave only the one-tick discharge at each stop line.
    let stalls: Vec<usize> = (1..traj.len()).filter(|&i| traj[i].1 == traj[i - 1].1).collect();
    assert!(stalls.len() <= 6, "{stalls:?}");
    assert!(stalls.windows(2).all(|w| w[1] > w[0] + 1), "{stalls:?}");
    assert!(stalls.iter().all(|&i| (traj[i].1 / 300.0 - (traj[i].1 / 300.0).round()).abs() < 1e-9));

    let phases = fs::read_to_string(out.join("phases.csv")).unwrap();
    let rows: Vec<Vec<u32>> =
        phases.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    let ticks = rows.iter().map(|r| r[0]).max().unwrap() + 1;
    let nodes: std::collections::BTreeSet<u32> = rows.iter().map(|r| r[1]).collect();
    assert_eq!(nodes.len(), 6);
    assert_eq!(rows.len(), ticks as usize * nodes.len());
}

#[test]
fn never_departing_ev_gives_a_single_point() {
    let dir = TempDir::new().unwrap();
    let scen = generate(&dir, "greenwave-tradeoff", &["--horizon", "600"]);
    let cfg = write_config(&dir, "short.toml", "max_ticks = 20\n");
    let out = dir.path().join("st");
    ok(&["spacetime", "--scenario", s(&scen), "--config", s(&cfg), "--policy", "fixedtime", "--ev", "15", "--out", s(&out)]);
    assert_eq!(fs::read_to_string(out.join("trajectory.csv")).unwrap(), "tick,distance_m\n0,0\n");
}

#[test]
fn exit_codes_separate_usage_data_and_success() {
    let dir = TempDir::new().unwrap();
    let scen = generate(&dir, "grid(2,2)", &["--horizon", "60"]);
    let out = dir.path().join("o");
    let (sc, o) = (s(&scen), s(&out));

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["generate", "grid(0,3)", "--out", o]), 1);
    assert_eq!(code(&["eval", "--scenario", sc, "--policy", "nope", "--out", o]), 1);
    assert_eq!(code(&["eval", "--scenario", sc, "--policy", "levid", "--out", o]), 1);
    assert_eq!(code(&["train", "--scenario", sc, "--policy", "fixedtime", "--out", o]), 1);

    assert_eq!(code(&["eval", "--scenario", s(&dir.path().join("missing.json")), "--policy", "fixedtime", "--out", o]), 2);
    let bad = write_config(&dir, "bad.toml", "bogus_key = 1\n");
    assert_eq!(code(&["eval", "--scenario", sc, "--config", s(&bad), "--policy", "fixedtime", "--out", o]), 2);
    let garbage = write_config(&dir, "garbage.json", "{ not json");
    assert_eq!(code(&["eval", "--scenario", s(&garbage), "--policy", "fixedtime", "--out", o]), 2);
    assert_eq!(code(&["spacetime", "--scenario", sc, "--policy", "fixedtime", "--ev", "9999", "--out", o]), 2);

    assert_eq!(code(&["eval", "--scenario", sc, "--policy", "maxpressure", "--out", o]), 0);
}
