//! End-to-end checks of the binary: artifact layout, exit codes, and
//! re-run determinism, all against a small fast scenario.

use std::path::Path;
use std::process::{Command, Output};

fn write_fixture(dir: &Path) -> std::path::PathBuf {
    let planner = r#"
lambda2 = 2.0
lambda3 = 0.5
eta = 2.0
n = 21
t_f = 4.0
"#;
    let scenario = r#"
name = "mini"
seed = 5
duration_s = 6.0
replan_hz = 5.0
warmup_s = 2.0
planner_config = "planner.toml"

[world]
ground_z = 0.0
bounds = { min = [0.0, 0.0, 0.0], max = [40.0, 30.0, 20.0] }
boxes = [{ min = [18.0, 8.0, 0.0], max = [21.0, 11.0, 7.0] }]

[grid]
dims = [40, 30, 22]
resolution = 1.0
origin = [0.0, 0.0, -2.0]

[sdf]
truncation = 4.0

[lidar]
channels = [-0.26, -0.13, 0.0, 0.13, 0.26]
azimuth_steps = 180
max_range = 60.0
rate_hz = 10.0

[actor]
kind = "person"
speed = 1.2
path = { shape = "polyline", points = [[8.0, 20.0, 1.0], [32.0, 20.0, 1.0]] }

[shot]
rho = 5.0
phi_rel = 1.5707963267948966
theta_rel = 0.5

[drone]
start = [8.0, 24.3, 3.4]
start_heading = -1.5707963267948966
"#;
    std::fs::write(dir.join("planner.toml"), planner).unwrap();
    let path = dir.join("mini.toml");
    std::fs::write(&path, scenario).unwrap();
    path
}

fn skyshot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skyshot")).args(args).output().unwrap()
}

#[test]
fn run_writes_artifacts_and_reports_success() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_fixture(tmp.path());
    let out = tmp.path().join("out");
    let res = skyshot(&[
        "run",
        "--scenario",
        scenario.to_str().unwrap(),
        "--mode",
        "online",
        "--actor",
        "gt",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    for f in ["report.json", "cycles.csv", "timing.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["scenario"], "mini");
    assert_eq!(report["mode"], "online/gt");
    assert_eq!(report["cycles"], 30);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("30 cycles"), "stdout: {stdout}");
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_fixture(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let res = skyshot(&[
            "run",
            "--scenario",
            scenario.to_str().unwrap(),
            "--mode",
            "online",
            "--actor",
            "noisy:0.5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success());
    }
    let csv_a = std::fs::read(a.join("cycles.csv")).unwrap();
    let csv_b = std::fs::read(b.join("cycles.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    // the report embeds wall-clock timing; everything else must match
    let mut rep_a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    let mut rep_b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.join("report.json")).unwrap()).unwrap();
    rep_a.as_object_mut().unwrap().remove("timing");
    rep_b.as_object_mut().unwrap().remove("timing");
    assert_eq!(rep_a, rep_b);
}

#[test]
fn compare_writes_both_lanes_and_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_fixture(tmp.path());
    let out = tmp.path().join("cmp");
    let res = skyshot(&[
        "compare",
        "--scenario",
        scenario.to_str().unwrap(),
        "--a",
        "gt-map/gt",
        "--b",
        "gt-map/noisy:1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    for f in [
        "comparison.json",
        "manifest.json",
        "a/report.json",
        "a/cycles.csv",
        "b/report.json",
        "b/cycles.csv",
        "path_a.csv",
        "path_b.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("comparison.json")).unwrap())
            .unwrap();
    assert_eq!(summary["mode_a"], "gt-map/gt");
    assert_eq!(summary["mode_b"], "gt-map/noisy:1");
    assert!(summary["cost_ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn bench_map_writes_the_timing_series() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_fixture(tmp.path());
    let out = tmp.path().join("bench");
    let res = skyshot(&[
        "bench-map",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    for f in ["bench.csv", "bench.json", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "scan,t,changed_cells,incremental_ms,batch_ms");
    assert_eq!(csv.lines().count(), 31);
}

#[test]
fn config_problems_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_fixture(tmp.path());
    let out = tmp.path().join("x");

    let missing = skyshot(&[
        "run",
        "--scenario",
        tmp.path().join("nope.toml").to_str().unwrap(),
        "--mode",
        "online",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(2));

    let bad_mode = skyshot(&[
        "run",
        "--scenario",
        scenario.to_str().unwrap(),
        "--mode",
        "telepathy",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(bad_mode.status.code(), Some(2));

    let bad_actor = skyshot(&[
        "compare",
        "--scenario",
        scenario.to_str().unwrap(),
        "--a",
        "gt-map/gt",
        "--b",
        "online/noisy:-3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(bad_actor.status.code(), Some(2));

    let malformed = tmp.path().join("broken.toml");
    std::fs::write(&malformed, "name = \"broken\"\nduration_s = ").unwrap();
    let parse = skyshot(&[
        "run",
        "--scenario",
        malformed.to_str().unwrap(),
        "--mode",
        "online",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(parse.status.code(), Some(2));
}
