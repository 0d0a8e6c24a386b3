use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gacan"))
}

fn scratch(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("gacan-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Synthetic data in `dir/d` plus a short training config at `dir/run.cfg`.
fn setup(tag: &str, nodes: usize, days: usize) -> PathBuf {
    let dir = scratch(tag);
    let o = run(
        &dir,
        &["synth", "--nodes", &nodes.to_string(), "--days", &days.to_string(), "--out", "d"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(
        dir.join("run.cfg"),
        "speeds = d/speeds.csv\ndistances = d/distances.csv\nmax_steps = 6\neval_every = 3\nval_limit = 8\nbatch_size = 4\n",
    )
    .unwrap();
    dir
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = scratch("synth");
    for out in ["a", "b"] {
        assert_eq!(code(&run(&dir, &["--seed", "3", "synth", "--days", "1", "--out", out])), 0);
    }
    assert_eq!(code(&run(&dir, &["--seed", "4", "synth", "--days", "1", "--out", "c"])), 0);
    let read = |d: &str| fs::read(dir.join(d).join("speeds.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    assert_eq!(data_rows(&dir.join("a/speeds.csv")).len(), 288);
}

#[test]
fn synth_rejects_zero_days() {
    let dir = scratch("synth0");
    let o = run(&dir, &["synth", "--days", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_speed_file_is_a_data_error() {
    let dir = scratch("missing");
    fs::write(dir.join("run.cfg"), "speeds = nowhere.csv\n").unwrap();
    let o = run(&dir, &["--config", "run.cfg", "train"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nowhere.csv"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = scratch("badkey");
    fs::write(dir.join("run.cfg"), "speeds = s.csv\nlerning_rate = 0.1\n").unwrap();
    let o = run(&dir, &["--config", "run.cfg", "train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lerning_rate"));
}

#[test]
fn node_count_mismatch_is_a_config_error() {
    let dir = setup("mismatch", 4, 3);
    let cfg = fs::read_to_string(dir.join("run.cfg")).unwrap() + "n_nodes = 5\n";
    fs::write(dir.join("bad.cfg"), cfg).unwrap();
    assert_eq!(code(&run(&dir, &["--config", "bad.cfg", "train", "--out", "t"])), 2);
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = setup("pipeline", 4, 14);
    let o = run(&dir, &["--config", "run.cfg", "train", "--out", "t"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoint.txt", "history.csv", "config.txt"] {
        assert!(dir.join("t").join(f).exists(), "{f}");
    }
    assert_eq!(data_rows(&dir.join("t/history.csv")).len(), 2);

    let o = run(
        &dir,
        &["--config", "run.cfg", "eval", "--checkpoint", "t/checkpoint.txt", "--out", "e"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("e/metrics.json")).unwrap()).unwrap();
    let mae = metrics["mae"].as_array().unwrap();
    let rmse = metrics["rmse"].as_array().unwrap();
    assert_eq!(metrics["horizon_minutes"], serde_json::json!([15, 30, 60]));
    for (a, r) in mae.iter().zip(rmse) {
        assert!(a.as_f64().unwrap() <= r.as_f64().unwrap() + 1e-12);
    }
    for key in ["config_hash", "seed", "dataset_id", "split"] {
        assert!(metrics["meta"][key].is_string(), "{key}");
    }
    let rows = data_rows(&dir.join("e/predictions.csv"));
    let t0s: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(rows.len(), t0s.len() * 12 * 4);
    assert!(dir.join("e/ha_metrics.json").exists());

    let o = run(
        &dir,
        &["--config", "run.cfg", "predict", "--checkpoint", "t/checkpoint.txt", "--t0", "3000", "--out", "p"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.join("p/predict.csv")).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines[0], "horizon,node_0,node_1,node_2,node_3");
    assert_eq!(lines.len(), 13);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));

    let o = run(
        &dir,
        &["--config", "run.cfg", "predict", "--checkpoint", "t/checkpoint.txt", "--t0", "3", "--out", "p"],
    );
    assert_eq!(code(&o), 3);

    let mut cfg = fs::read_to_string(dir.join("run.cfg")).unwrap();
    cfg.push_str("horizon = 6\n");
    fs::write(dir.join("h6.cfg"), cfg).unwrap();
    let o = run(
        &dir,
        &["--config", "h6.cfg", "eval", "--checkpoint", "t/checkpoint.txt", "--out", "e2"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn eval_rejects_data_with_other_node_count() {
    let dir = setup("evaln", 4, 14);
    assert_eq!(code(&run(&dir, &["--config", "run.cfg", "train", "--out", "t"])), 0);
    assert_eq!(code(&run(&dir, &["synth", "--nodes", "5", "--days", "14", "--out", "d"])), 0);
    let o = run(&dir, &["--config", "run.cfg", "eval", "--checkpoint", "t/checkpoint.txt"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn training_reruns_are_byte_identical() {
    let dir = setup("rerun", 4, 14);
    for out in ["r1", "r2"] {
        assert_eq!(code(&run(&dir, &["--config", "run.cfg", "train", "--out", out])), 0);
    }
    for f in ["checkpoint.txt", "history.csv", "config.txt"] {
        assert_eq!(
            fs::read(dir.join("r1").join(f)).unwrap(),
            fs::read(dir.join("r2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn divergence_exits_four_and_keeps_parameters() {
    let dir = setup("diverge", 4, 14);
    let cfg = fs::read_to_string(dir.join("run.cfg")).unwrap() + "learning_rate = 1e300\n";
    fs::write(dir.join("div.cfg"), cfg).unwrap();
    let o = run(&dir, &["--config", "div.cfg", "train", "--out", "t"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let ck = fs::read_to_string(dir.join("t/diverged.ckpt")).unwrap();
    assert!(!ck.contains("NaN") && !ck.contains("inf"));
}

#[test]
fn gradcheck_primitives_pass_and_fault_fails() {
    let dir = scratch("grad");
    let o = run(&dir, &["gradcheck", "--scope", "primitives", "--trials", "20"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&dir, &["gradcheck", "--scope", "primitives", "--trials", "20", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sigmoid"));
    let o = run(&dir, &["gradcheck", "--scope", "block", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("ln.gain"));
}

#[test]
fn gradcheck_network_scope_passes() {
    let dir = scratch("gradnet");
    let o = run(&dir, &["gradcheck", "--scope", "model", "--write", "--out", "g"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(dir.join("g/gradcheck.txt")).unwrap().starts_with("# config_hash="));
}

#[test]
fn ablation_writes_one_row_per_mode_and_bucket() {
    let dir = setup("ablate", 4, 14);
    for out in ["x", "y"] {
        let o = run(&dir, &["--config", "run.cfg", "ablate", "--modes", "a,c,d", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let rows = data_rows(&dir.join("x/ablation.csv"));
    assert_eq!(rows.len(), 9);
    assert_eq!(rows.iter().filter(|r| r.starts_with("c,")).count(), 3);
    assert_eq!(
        fs::read(dir.join("x/ablation.csv")).unwrap(),
        fs::read(dir.join("y/ablation.csv")).unwrap()
    );
    let o = run(&dir, &["--config", "run.cfg", "ablate", "--modes", "a,z"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn preprocess_fills_gaps() {
    let dir = setup("prep", 4, 2);
    let path = dir.join("d/speeds.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut fields: Vec<String> = lines[10].split(',').map(str::to_string).collect();
    fields[2].clear();
    lines[10] = fields.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = run(&dir, &["--config", "run.cfg", "preprocess", "--out", "pp"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("pp/preprocess.json")).unwrap()).unwrap();
    assert_eq!(summary["filled_readings"], 1);
    assert_eq!(summary["nodes"], 4);
    assert!(data_rows(&dir.join("pp/speeds.csv")).iter().all(|r| !r.contains(",,")));
    assert!(dir.join("pp/adjacency.csv").exists());
}
