use std::path::Path;
use std::process::{Command, Output};

fn subfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subfl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = subfl(args);
    assert!(
        out.status.success(),
        "subfl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = r#"
run_seed = 3
[graph]
kind = "sbm"
block_sizes = [20, 20, 20]
p_in = 0.4
p_out = 0.05
feat_dim = 5
[partition]
kind = "chunks"
size = 15
[model]
hidden = 6
[training]
rounds = 2
lr = 0.01
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_then_partition() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.json");
    let p = dir.path().join("p.json");
    let g_str = g.to_str().unwrap();
    let out = ok(&[
        "gen", "--blocks", "30,30", "--p-in", "0.3", "--p-out", "0.02", "--seed", "1", "-o", g_str,
    ]);
    assert!(out.contains("60 nodes"));
    let out = ok(&[
        "partition",
        g_str,
        "--method",
        "louvain",
        "-k",
        "2",
        "-o",
        p.to_str().unwrap(),
    ]);
    assert!(out.contains("2 clients"));
    assert!(dir.path().join("p.metrics.json").exists());
    let missing = std::fs::read_to_string(dir.path().join("p.missing.csv")).unwrap();
    assert_eq!(missing.lines().count(), 2);
    assert!(!subfl(&[
        "partition",
        g_str,
        "--method",
        "nope",
        "-o",
        p.to_str().unwrap()
    ])
    .status
    .success());
}

#[test]
fn zero_round_run_writes_the_skeleton() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &SMALL.replace("rounds = 2", "rounds = 0"),
    );
    let run = dir.path().join("run");
    let out = ok(&["run", &cfg, "-o", run.to_str().unwrap()]);
    assert!(out.contains("no rounds run"));
    assert!(run.join("manifest.json").exists());
    assert!(run.join("checkpoints/init.json").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(metrics.starts_with("round,client_id,strategy"));
}

#[test]
fn repeated_runs_and_replay_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    ok(&["run", &cfg, "-o", a.to_str().unwrap(), "--workers", "1"]);
    ok(&["run", &cfg, "-o", b.to_str().unwrap(), "--workers", "3"]);
    ok(&[
        "run",
        "--replay",
        a.to_str().unwrap(),
        "-o",
        c.to_str().unwrap(),
    ]);
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a), read(&c));
    assert_eq!(
        std::fs::read(a.join("similarity/round_2.csv")).unwrap(),
        std::fs::read(c.join("similarity/round_2.csv")).unwrap()
    );
}

#[test]
fn sweep_runs_each_point_and_report_follows() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[sweep]\n\"strategy.kind\" = [\"fedpub\", \"fedavg\"]\n");
    let cfg = write_config(dir.path(), "s.toml", &text);
    let out_dir = dir.path().join("sweep");
    ok(&["run", &cfg, "-o", out_dir.to_str().unwrap()]);
    let fedpub = out_dir.join("strategy.kind=fedpub");
    assert!(out_dir
        .join("strategy.kind=fedavg")
        .join("metrics.csv")
        .exists());
    let out = ok(&["report", fedpub.to_str().unwrap()]);
    assert!(out.contains("wrote report"));
    assert!(fedpub.join("report/comm_summary.csv").exists());
    assert!(fedpub.join("report/neighbor_report.csv").exists());
}

#[test]
fn bad_configs_are_rejected_with_the_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &SMALL.replace("lr = 0.01", "lr = -1.0"),
    );
    let out = subfl(&["run", &cfg, "-o", dir.path().join("r").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("training.lr"));
    let out = subfl(&["run"]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--instances", "5", "--seed", "2"]);
    assert!(out.contains("max relative error"));
}
