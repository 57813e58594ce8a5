use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn geoprobe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoprobe")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Synth output in a fresh temp dir.
fn synth(samples: usize, extra: &[&str]) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let n = samples.to_string();
    let mut args = vec!["synth", "--seed", "5", "--provinces", "4", "--cities", "4", "--samples", &n, "--out", "w"];
    args.extend(extra);
    let o = geoprobe(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let w = dir.path().join("w");
    (dir, w)
}

fn edit_config(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

fn difficulty_count(dataset: &Path, d: &str) -> usize {
    std::fs::read_to_string(dataset)
        .unwrap()
        .lines()
        .filter(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["difficulty"] == d)
        .count()
}

fn first_of(dataset: &Path, d: &str) -> (String, String) {
    std::fs::read_to_string(dataset)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["difficulty"] == d)
        .map(|v| (v["id"].as_str().unwrap().to_string(), v["truth_city"].as_str().unwrap().to_string()))
        .unwrap()
}

#[test]
fn default_mix_is_medium_majority() {
    let (_d, w) = synth(300, &[]);
    let ds = w.join("synth.bench.jsonl");
    assert_eq!(difficulty_count(&ds, "medium"), 170);
    assert_eq!(difficulty_count(&ds, "easy"), 70);
    assert_eq!(difficulty_count(&ds, "hard"), 60);
}

#[test]
fn synth_is_deterministic() {
    let (_a, wa) = synth(20, &[]);
    let (_b, wb) = synth(20, &[]);
    for f in ["world.json", "synth.bench.jsonl", "config.json"] {
        assert_eq!(std::fs::read(wa.join(f)).unwrap(), std::fs::read(wb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_mix_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&geoprobe(&["synth", "--mix", "0.5,0.6,0.2", "--out", "w"], dir.path())), 2);
    assert_eq!(code(&geoprobe(&["synth", "--mix", "1,0", "--out", "w"], dir.path())), 2);
}

#[test]
fn easy_run_finds_the_city() {
    let (_d, w) = synth(20, &[]);
    let ds = w.join("synth.bench.jsonl");
    let (id, city) = first_of(&ds, "easy");
    let o = geoprobe(&["run", "--config", "config.json", "--dataset", "synth.bench.jsonl", "--sample", &id], &w);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["city"], city.as_str());
    assert_eq!(v["status"], "finalized");
    assert!(w.join("out/traces").join(format!("{id}.trace.jsonl")).is_file());
}

#[test]
fn tiny_budget_finalizes_or_exhausts() {
    let (_d, w) = synth(20, &[]);
    edit_config(&w.join("config.json"), |v| v["max_steps"] = 1.into());
    let (id, _) = first_of(&w.join("synth.bench.jsonl"), "hard");
    let o = geoprobe(&["run", "--config", "config.json", "--dataset", "synth.bench.jsonl", "--sample", &id], &w);
    assert!([0, 3].contains(&code(&o)), "exit {:?}", o.status);
}

#[test]
fn config_errors_exit_2() {
    let (_d, w) = synth(5, &[]);
    edit_config(&w.join("config.json"), |v| v["world"] = "missing.json".into());
    let o = geoprobe(&["bench", "--config", "config.json", "--dataset", "synth.bench.jsonl"], &w);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));

    let (_d2, w2) = synth(5, &[]);
    edit_config(&w2.join("config.json"), |v| v["max_steps"] = 0.into());
    assert_eq!(code(&geoprobe(&["bench", "--config", "config.json", "--dataset", "synth.bench.jsonl"], &w2)), 2);
}

#[test]
fn empty_dataset_exits_2() {
    let (_d, w) = synth(5, &[]);
    std::fs::write(w.join("empty.bench.jsonl"), "").unwrap();
    let o = geoprobe(&["bench", "--config", "config.json", "--dataset", "empty.bench.jsonl"], &w);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset is empty"));
}

#[test]
fn bench_is_reproducible_and_labels_ablations() {
    let (_d, w) = synth(20, &[]);
    edit_config(&w.join("config.json"), |v| v["disabled_tools"] = serde_json::json!(["image_search"]));
    for out in ["a", "b"] {
        let o = geoprobe(&["bench", "--config", "config.json", "--dataset", "synth.bench.jsonl", "--out", out], &w);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["report.json", "report.txt", "predictions.jsonl"] {
        assert_eq!(std::fs::read(w.join("a").join(f)).unwrap(), std::fs::read(w.join("b").join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(w.join("a/report.json")).unwrap()).unwrap();
    assert_eq!(report["condition"], "w/o image search");
    assert_eq!(std::fs::read_dir(w.join("a/traces")).unwrap().count(), 20);
}

#[test]
fn replay_verdicts() {
    let (_d, w) = synth(5, &[]);
    let o = geoprobe(&["bench", "--config", "config.json", "--dataset", "synth.bench.jsonl"], &w);
    assert_eq!(code(&o), 0);
    let trace = w.join("out/traces/s0000.trace.jsonl");
    let ok = geoprobe(&["replay", trace.to_str().unwrap(), "--world", "world.json"], &w);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("verdict: OK"));

    // change one confidence digit in the first projection
    let text = std::fs::read_to_string(&trace).unwrap();
    let tampered = text.replacen("\"confidence\":0.9", "\"confidence\":0.8", 1);
    assert_ne!(tampered, text);
    let bad = w.join("bad.trace.jsonl");
    std::fs::write(&bad, tampered).unwrap();
    let o = geoprobe(&["replay", bad.to_str().unwrap(), "--config", "config.json"], &w);
    assert_eq!(code(&o), 4);
    assert!(stdout(&o).contains("MISMATCH"));

    std::fs::write(&bad, &text[..text.len() / 2]).unwrap();
    assert_eq!(code(&geoprobe(&["replay", bad.to_str().unwrap(), "--world", "world.json"], &w)), 2);
}
