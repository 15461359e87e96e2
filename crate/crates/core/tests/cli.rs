use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn autoshard(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autoshard"))
        .args(args)
        .current_dir(dir)
        .env_remove("AUTOSHARD_CLUSTER")
        .output()
        .expect("binary runs")
}

fn error_kind(out: &Output) -> String {
    let v: Value = serde_json::from_slice(&out.stderr).expect("error JSON on stderr");
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn gen_stack(dir: &Path, layers: &str) {
    let out = autoshard(
        &[
            "gen",
            "transformer",
            "--layers",
            layers,
            "--d-model",
            "16",
            "--heads",
            "2",
            "-o",
            "g.json",
        ],
        dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_on_four_layers_passes_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    gen_stack(dir.path(), "4");
    let out = autoshard(
        &[
            "pipeline",
            "--graph",
            "g.json",
            "--mesh",
            "1x4",
            "--out-dir",
            "out",
            "--trials",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "plan.json",
        "parallel_graph.json",
        "verify.json",
        "timing.json",
    ] {
        assert!(dir.path().join("out").join(f).is_file(), "{f} missing");
    }
    let verify: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/verify.json")).unwrap())
            .unwrap();
    assert_eq!(verify["verification"]["passed"], true);
    assert_eq!(verify["config"]["min_duplicates"], 2);
    assert_eq!(verify["config"]["cluster"]["n"], 4);
}

#[test]
fn missing_graph_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = autoshard(
        &["pipeline", "--graph", "absent.json", "--mesh", "1x4"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "io");
}

#[test]
fn empty_mesh_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_stack(dir.path(), "2");
    let out = autoshard(
        &["pipeline", "--graph", "g.json", "--mesh", "0x4"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "config");
}

#[test]
fn cluster_file_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    gen_stack(dir.path(), "2");
    std::fs::write(dir.path().join("c.json"), r#"{"m":1,"n":2,"inter_bw":1e9}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_autoshard"))
        .args(["plan", "--graph", "g.json"])
        .current_dir(dir.path())
        .env("AUTOSHARD_CLUSTER", "c.json")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let plan: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(plan["mesh"]["devices"], 2);
    assert_eq!(plan["cluster"]["inter_bw"], 1e9);
}

#[test]
fn plan_then_verify_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    gen_stack(dir.path(), "2");
    let plan = autoshard(
        &[
            "plan",
            "--graph",
            "g.json",
            "--mesh",
            "2x2",
            "--min-dup",
            "2",
            "--out",
            "p.json",
        ],
        dir.path(),
    );
    assert!(plan.status.success());
    let verify = autoshard(
        &[
            "verify", "--graph", "g.json", "--plan", "p.json", "--mesh", "2x2", "--trials", "2",
            "--dtype", "f64",
        ],
        dir.path(),
    );
    assert_eq!(verify.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&verify.stdout).unwrap();
    assert!(v["verification"]["worst"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn patterns_filter_by_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = autoshard(&["patterns", "--op", "matmul"], dir.path());
    let list: Vec<Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!list.is_empty());
    assert!(list.iter().all(|p| p["op"] == "matmul"));
    let bad = autoshard(&["patterns", "--op", "nonsense"], dir.path());
    assert_eq!(error_kind(&bad), "config");
}

#[test]
fn bench_with_one_layer_count_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = autoshard(
        &["bench", "--layers", "3", "--d-model", "16", "--heads", "2"],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
}
