use std::path::Path;
use std::process::{Command, Output};

fn polymerlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polymerlab"))
        .args(args)
        .env_remove("POLYMERLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const PARTITION: &str = r#"
[experiment]
kind = "partition"
seed = 11

[grid]
beta_ref = [0.5]
t = [1.0, 2.0]
n = 3
reps = 8
methods = ["replica-gaussian", "explicit-field"]
"#;

fn jsonl(dir: &Path) -> Vec<String> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    files
        .iter()
        .flat_map(|f| std::fs::read_to_string(f).unwrap().lines().map(String::from).collect::<Vec<_>>())
        .collect()
}

/// The record minus its timestamp and wall time.
fn value_fields(line: &str) -> String {
    let r: polymerlab::experiment::ResultRecord = serde_json::from_str(line).unwrap();
    r.value_fields()
}

#[test]
fn validate_accepts_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", PARTITION);
    let o = polymerlab(&["validate", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("partition-"));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    for (text, key) in [
        (PARTITION.replace("n = 3", "n = 3\nwidth = 2"), "width"),
        (PARTITION.replace("t = [1.0, 2.0]", "t = [1.0, 2.05]"), "grid.t[1]"),
        (PARTITION.replace("n = 3", "n = 3\ndelta = 1.0"), "grid.delta"),
        (PARTITION.replace("kind = \"partition\"", "kind = \"nonsense\""), "nonsense"),
    ] {
        let cfg = write(dir.path(), "bad.toml", &text);
        let out = dir.path().to_str().unwrap();
        for args in [vec!["validate", "--config", &cfg], vec!["run", "--config", &cfg, "--out", out]] {
            let cmd = args[0];
            let o = polymerlab(&args);
            assert_eq!(o.status.code(), Some(2), "{cmd} {key}");
            let err = String::from_utf8_lossy(&o.stderr);
            assert!(err.contains(key), "{cmd}: `{key}` missing from {err}");
        }
    }
    assert!(jsonl(dir.path()).is_empty());
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = polymerlab(&["validate", "--config", "/nonexistent/x.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resource_cap_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = PARTITION
        .replace("methods = [\"replica-gaussian\", \"explicit-field\"]", "methods = [\"explicit-field\"]")
        .replace("[grid]", "[model]\nmax_bytes = 1024\n\n[grid]");
    let cfg = write(dir.path(), "c.toml", &text);
    let o = polymerlab(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn empty_grid_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &PARTITION.replace("beta_ref = [0.5]", "beta_ref = []"));
    let out = dir.path().join("res");
    let o = polymerlab(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(jsonl(&out).is_empty());
}

#[test]
fn deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", PARTITION);
    let mut runs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = polymerlab(&["run", "--config", &cfg, "--threads", threads, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(jsonl(&out).iter().map(|l| value_fields(l)).collect::<Vec<_>>());
    }
    assert_eq!(runs[0].len(), 4);
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn threads_fall_back_to_env_var() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", PARTITION);
    let out = dir.path().join("r");
    let o = Command::new(env!("CARGO_BIN_EXE_polymerlab"))
        .args(["run", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env("POLYMERLAB_THREADS", "0")
        .output()
        .unwrap();
    // zero workers is rejected by validation, proving the variable was read
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("experiment.threads"));
}

#[test]
fn rerun_appends_and_report_pools_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", PARTITION);
    let out = dir.path().join("r");
    let outs = out.to_str().unwrap();
    for seed in ["1", "2", "2"] {
        assert!(polymerlab(&["run", "--config", &cfg, "--seed", seed, "--out", outs]).status.success());
    }
    let lines = jsonl(&out);
    assert_eq!(lines.len(), 12);
    // the rerun with seed 2 repeats the earlier records exactly
    assert_eq!(value_fields(&lines[4]), value_fields(&lines[8]));

    let o = polymerlab(&["report", "--out", outs]);
    assert!(o.status.success());
    let summary = String::from_utf8_lossy(&o.stdout);
    assert!(summary.contains("4 duplicates"), "{summary}");
    let csv = std::fs::read_to_string(out.join("report/plot_data.csv")).unwrap();
    let mut rows = csv.lines();
    assert_eq!(rows.next().unwrap(), "experiment,beta,t_or_eps,statistic,value,stderr");
    assert!(rows.any(|r| r.contains("partition.mean_z[method=explicit-field;n=3;reps=8]")), "{csv}");
    let again = polymerlab(&["report", "--out", outs]);
    assert!(again.status.success());
    assert_eq!(csv, std::fs::read_to_string(out.join("report/plot_data.csv")).unwrap());
}

#[test]
fn report_on_empty_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = polymerlab(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("0 records"));
}

#[test]
fn report_counts_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.jsonl"), "garbage\n{\"also\": 1}\n").unwrap();
    let o = polymerlab(&["report", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipped 2 malformed"));
}

#[test]
fn phase_scan_verdict_table_covers_every_beta() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
[experiment]
kind = "phase-scan"
seed = 3

[grid]
beta_ref = [0.25, 0.5, 1.0, 2.0, 4.0]
t = [1.0, 2.0, 4.0]
n = 4
reps = 40
"#;
    let cfg = write(dir.path(), "c.toml", text);
    let outs = dir.path().join("r");
    let outs = outs.to_str().unwrap();
    assert!(polymerlab(&["run", "--config", &cfg, "--out", outs]).status.success());
    assert!(polymerlab(&["report", "--out", outs]).status.success());
    let table = std::fs::read_to_string(Path::new(outs).join("report/verdicts.csv")).unwrap();
    let multiples: Vec<f64> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(multiples, vec![0.25, 0.5, 1.0, 2.0, 4.0]);
}
