use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"map_width": 14, "map_height": 14, "border_thickness": 3, "obs_crop": 7,
 "spawn_cap": 8, "embed_dim": 8, "hidden_dim": 12, "conv_channels": 3, "n_populations": 2, "batch_actions": 64}"#;

fn mmoforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmoforge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_config(dir: &Path) {
    std::fs::write(dir.join("small.json"), SMALL).unwrap();
}

#[test]
fn generate_map_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    ok(&mmoforge(d.path(), &["--seed", "3", "--out", "a.txt", "generate-map"]));
    ok(&mmoforge(d.path(), &["--seed", "3", "--out", "b.txt", "generate-map"]));
    ok(&mmoforge(d.path(), &["--seed", "4", "--out", "c.txt", "generate-map"]));
    let read = |n: &str| std::fs::read_to_string(d.path().join(n)).unwrap();
    assert_eq!(read("a.txt"), read("b.txt"));
    assert_ne!(read("a.txt"), read("c.txt"));
    let manifest: serde_json::Value = serde_json::from_str(&read("a.txt.run.json")).unwrap();
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn idle_agent_death_reported_at_tick_fourteen() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&mmoforge(
        d.path(),
        &["--out", "run", "--log-events", "ev.jsonl", "simulate", "--policy", "idle", "--ticks", "20", "--agents", "1"],
    ));
    let first = out.lines().find(|l| l.contains("death")).expect("a death line");
    assert!(first.starts_with("tick=14 "), "{first}");
    assert!(first.contains("cause=starvation"), "{first}");
    assert!(d.path().join("run/run.json").exists());
    let hashes = std::fs::read_to_string(d.path().join("run/hashes.txt")).unwrap();
    assert_eq!(hashes.lines().count(), 20);
    let events = std::fs::read_to_string(d.path().join("ev.jsonl")).unwrap();
    for line in events.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn simulate_twice_gives_identical_hashes() {
    let d = tempfile::tempdir().unwrap();
    for o in ["a", "b"] {
        ok(&mmoforge(d.path(), &["--seed", "7", "--out", o, "simulate", "--policy", "aggressor", "--ticks", "100"]));
    }
    let read = |n: &str| std::fs::read(d.path().join(n).join("hashes.txt")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn train_then_evaluate_and_overlay() {
    let d = tempfile::tempdir().unwrap();
    small_config(d.path());
    let out = ok(&mmoforge(d.path(), &["--config", "small.json", "--out", "t", "train", "--steps", "2"]));
    assert!(out.contains("steps=2"));
    let metrics = std::fs::read_to_string(d.path().join("t/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(d.path().join("t/run.json").exists());

    let ev = ok(&mmoforge(d.path(), &["--config", "small.json", "--out", "t", "evaluate", "--episodes", "2", "--ticks", "40"]));
    let mean: f64 = ev
        .split_whitespace()
        .find_map(|w| w.strip_prefix("mean_lifetime="))
        .expect("mean_lifetime in output")
        .parse()
        .unwrap();
    assert!(mean > 0.0);

    ok(&mmoforge(
        d.path(),
        &["--config", "small.json", "--out", "t", "overlay", "--kind", "value", "--checkpoint", "t/checkpoint.mmfc"],
    ));
    let pgm = std::fs::read(d.path().join("t/value.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5 20 20 255\n"));
    assert_eq!(pgm.len(), "P5 20 20 255\n".len() + 400);
}

#[test]
fn layouts_agree_on_parameters() {
    let d = tempfile::tempdir().unwrap();
    small_config(d.path());
    let params = |extra: &[&str]| {
        let mut args = vec!["--config", "small.json", "--out", "p", "train", "--steps", "2"];
        args.extend_from_slice(extra);
        let out = ok(&mmoforge(d.path(), &args));
        out.split_whitespace().find_map(|w| w.strip_prefix("params=")).unwrap().to_string()
    };
    let one = params(&["--envs", "2"]);
    assert_eq!(one, params(&["--servers", "2", "--clients", "2"]));
    assert_eq!(one, params(&["--servers", "2", "--clients", "1", "--distributed"]));
}

#[test]
fn exit_codes_distinguish_failures() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.json"), r#"{"map_width": "wide"}"#).unwrap();
    let cases: [(&[&str], i32, &str); 5] = [
        (&["frobnicate"], 2, "usage"),
        (&["--config", "bad.json", "simulate"], 3, "config"),
        (&["simulate", "--policy", "nope"], 3, "config"),
        (&["--config", "missing.json", "simulate"], 4, "missing_file"),
        (&["evaluate", "--checkpoint", "nothing.mmfc"], 4, "missing_file"),
    ];
    for (args, code, kind) in cases {
        let out = mmoforge(d.path(), args);
        assert_eq!(out.status.code(), Some(code), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        let line = err.lines().last().unwrap();
        assert!(line.starts_with(&format!("error kind={kind} code={code} message=")), "{line}");
    }
}
