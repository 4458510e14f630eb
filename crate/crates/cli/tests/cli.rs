use std::path::Path;
use std::process::{Command, Output};

fn albalance(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_albalance"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("ALBALANCE_SEED")
        .args(["--desk", "--data-seed", "3"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = albalance(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn offline_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--out", "data"]);
    assert!(dir.join("data/manifest.json").exists());
    let data = ["--data", "data"];

    ok(dir, &[&data[..], &["partition", "--out", "units.jsonl"]].concat());
    let units = std::fs::read_to_string(dir.join("units.jsonl")).unwrap();
    assert!(units.lines().count() > 10);

    ok(dir, &[&data[..], &["train", "--out", "m.alrt", "--epochs", "20"]].concat());
    let report: serde_json::Value =
        serde_json::from_str(&ok(dir, &[&data[..], &["eval", "--model", "m.alrt"]].concat())).unwrap();
    assert!(report["miou"].as_f64().unwrap() > 0.0);

    let args = ["select", "--model", "m.alrt", "--units", "units.jsonl", "--pixels", "500", "--out", "sel.jsonl"];
    ok(dir, &[&data[..], &args].concat());
    let cost: u64 = std::fs::read_to_string(dir.join("sel.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["cost"].as_u64().unwrap())
        .sum();
    assert!(cost > 0 && cost <= 500);

    ok(dir, &[&data[..], &["pseudo", "--model", "m.alrt", "--class-iou", "0.9,0.2,0.5,0.6,0.4,0.3", "--out", "pl"]].concat());
    ok(dir, &[&data[..], &["train", "--labels", "pl", "--out", "m2.alrt", "--epochs", "5"]].concat());
}

#[test]
fn loop_is_reproducible_and_seed_comes_from_env() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["--budget", "0.08", "--seed", "5", "loop", "--out", "a"]);
    ok(dir, &["--budget", "0.08", "--seed", "5", "loop", "--out", "b", "--journal", "j.bin"]);
    let a = std::fs::read(dir.join("a/runlog-5.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.join("b/runlog-5.jsonl")).unwrap());
    assert!(dir.join("j.bin").metadata().unwrap().len() > 0);

    let out = Command::new(env!("CARGO_BIN_EXE_albalance"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("ALBALANCE_SEED", "5")
        .args(["--desk", "--data-seed", "3", "--budget", "0.08", "loop", "--out", "c"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(a, std::fs::read(dir.join("c/runlog-5.jsonl")).unwrap());
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("run.toml"),
        "region_size = 8\nround_budget_pixels = 2400\nimages_per_round = 8\nprototype_patch = 16\n\
         total_budget_fraction = 0.5\nseeds = [1, 2]\n[edge]\ngaussian_kernel = 5\ndilation_kernel = 3\n\
         max_unit_pixels = 64\n[train]\nbatch_size = 2048\nmax_steps_per_epoch = 2\n",
    )
    .unwrap();
    let stdout = ok(dir, &["--config", "run.toml", "--budget", "0.07", "loop", "--out", "r"]);
    assert_eq!(stdout.lines().count(), 2);
    for seed in [1, 2] {
        let log = std::fs::read_to_string(dir.join(format!("r/runlog-{seed}.jsonl"))).unwrap();
        let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
        assert!(last["budget_fraction"].as_f64().unwrap() <= 0.07);
    }
}

#[test]
fn bad_input_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = albalance(tmp.path(), &["--strategy", "greedy", "loop", "--out", "x"]);
    assert!(!out.status.success());
    let out = albalance(tmp.path(), &["--budget", "1.5", "loop", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("total_budget_fraction"));
    let out = albalance(tmp.path(), &["eval", "--model", "missing.alrt"]);
    assert!(!out.status.success());
}
