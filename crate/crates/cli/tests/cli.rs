// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn carshare(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carshare")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const MODEL: &str = "[model]\nlambda = 1.0\nmu = 1.0\nnu = 2.0\nk = 2\n";

fn write_config(dir: &Path, body: &str) {
    std::fs::write(dir.join("run.toml"), format!("{MODEL}\n{body}")).unwrap();
}

#[test]
fn simulate_without_samples_writes_manifest_only() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "[simulate]\nn = 5\nm = 4\nhorizon = 3.0\nseed = 1\n");
    let out = carshare(tmp.path(), &["simulate", "-c", "run.toml", "-o", "o"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut files: Vec<String> = std::fs::read_dir(tmp.path().join("o"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["manifest.json"]);
    let m = read_json(&tmp.path().join("o/manifest.json"));
    assert_eq!(m["violations"], 0);
    assert_eq!(m["runs"][0]["seed"], 1);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn simulate_single_station_follows_the_cycle() {
    // One station, one car, capacity 2: the only possible moves are
    // available -> reserved (w = z = 1) -> driving (x = 1) -> available.
    let tmp = tempfile::tempdir().unwrap();
    let times: Vec<String> = (0..=200).map(|i| format!("{}", f64::from(i) * 0.05)).collect();
    write_config(
        tmp.path(),
        &format!("[simulate]\nn = 1\nm = 1\nhorizon = 10.0\nseed = 17\nsample_times = [{}]\n", times.join(", ")),
    );
    let out = carshare(tmp.path(), &["simulate", "-c", "run.toml", "-o", "o"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("o/trajectory.csv")).unwrap();
    let states: Vec<String> = csv.lines().skip(1).map(|l| l.splitn(3, ',').nth(2).unwrap().to_string()).collect();
    assert_eq!(states.len(), 201);
    assert_eq!(states[0], "0,0,1,0");
    let next = |s: &str| match s {
        "0,0,1,0" => "1,0,0,1",
        "1,0,0,1" => "0,1,0,0",
        "0,1,0,0" => "0,0,1,0",
        other => panic!("unexpected state {other}"),
    };
    let mut moves = 0;
    for pair in states.windows(2) {
        if pair[0] != pair[1] {
            moves += 1;
            // A 0.05 sampling step can hide at most a few events; the visited
            // states still have to appear in cycle order.
            let mut s = pair[0].as_str();
            let mut hops = 0;
            while s != pair[1] {
                s = next(s);
                hops += 1;
                assert!(hops < 3, "{} -> {} is not a forward move", pair[0], pair[1]);
            }
        }
    }
    assert!(moves > 3);

    // Same config, same bytes.
    let again = carshare(tmp.path(), &["simulate", "-c", "run.toml", "-o", "o2"]);
    assert_eq!(code(&again), 0);
    assert_eq!(csv, std::fs::read_to_string(tmp.path().join("o2/trajectory.csv")).unwrap());
    let m1 = read_json(&tmp.path().join("o/manifest.json"));
    let m2 = read_json(&tmp.path().join("o2/manifest.json"));
    assert_eq!(m1["config_sha256"], m2["config_sha256"]);
}

#[test]
fn simulate_rejects_oversized_fleet() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "[simulate]\nn = 3\nm = 7\nhorizon = 1.0\nseed = 1\n");
    let out = carshare(tmp.path(), &["simulate", "-c", "run.toml", "-o", "o"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_key_is_named_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "[simulate]\nn = 3\nm = 1\nhorizon = 1.0\nseed = 1\nsed = 2\n");
    let out = carshare(tmp.path(), &["simulate", "-c", "run.toml"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sed"));
}

#[test]
fn meanfield_zero_horizon_echoes_initial_measure() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(
        tmp.path(),
        "[meanfield]\ninitial = { kind = \"all_available\", s = 1.25 }\nhorizon = 0.0\ndt = 0.01\n",
    );
    let out = carshare(tmp.path(), &["meanfield", "-c", "run.toml", "-o", "o"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("o/meanfield.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).filter(|l| !l.ends_with(",0")).collect();
    assert_eq!(rows, ["0,0,0,1,0,0.75", "0,0,0,2,0,0.25"]);
}

#[test]
fn meanfield_empty_station_is_stationary() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(
        tmp.path(),
        "[meanfield]\ninitial = { kind = \"point\", state = [0, 0, 0, 0] }\nhorizon = 5.0\ndt = 0.05\nstride = 20\n",
    );
    let out = carshare(tmp.path(), &["meanfield", "-c", "run.toml", "-o", "o"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("o/meanfield.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let expected = if line.split(',').skip(1).take(4).all(|v| v == "0") { "1" } else { "0" };
        assert_eq!(line.rsplit(',').next().unwrap(), expected, "{line}");
    }
}

#[test]
fn meanfield_rejects_unstable_step() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(
        tmp.path(),
        "[meanfield]\ninitial = { kind = \"point\", state = [0, 0, 1, 0] }\nhorizon = 10.0\ndt = 5.0\n",
    );
    let out = carshare(tmp.path(), &["meanfield", "-c", "run.toml", "-o", "o"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stability"));
}

#[test]
fn meanfield_reads_initial_measure_from_file() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "[equilibrium]\ns = 0.8\n");
    assert_eq!(code(&carshare(tmp.path(), &["equilibrium", "-c", "run.toml", "-o", "eq"])), 0);
    write_config(
        tmp.path(),
        "[meanfield]\ninitial = { kind = \"file\", path = \"eq/pi.csv\" }\nhorizon = 1.0\ndt = 0.01\nstride = 100\n",
    );
    let out = carshare(tmp.path(), &["meanfield", "-c", "run.toml", "-o", "mf"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&tmp.path().join("mf/summary.json"));
    let last = summary.as_array().unwrap().last().unwrap();
    assert!((last["summary"]["mean_fill"].as_f64().unwrap() - 0.8).abs() < 1e-9);
    assert!(last["summary"]["stationarity_residual"].as_f64().unwrap() < 1e-8);
}

#[test]
fn equilibrium_k1_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("run.toml"),
        "[model]\nlambda = 2.0\nmu = 1.0\nnu = 1e8\nk = 1\n\n[equilibrium]\ns = 0.75\n",
    )
    .unwrap();
    let out = carshare(tmp.path(), &["equilibrium", "-c", "run.toml", "-o", "o"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&tmp.path().join("o/report.json"));
    assert!((r["rho"]["rho1"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!((r["rho"]["rho2"].as_f64().unwrap() - 2.0).abs() < 1e-6);
    for key in ["eta1", "rho1", "rho2", "eta2", "s"] {
        assert!(r["residuals"][key].as_f64().unwrap() < 1e-10, "{key}");
    }
    let pi = std::fs::read_to_string(tmp.path().join("o/pi.csv")).unwrap();
    assert_eq!(pi.lines().count(), 6);
}

#[test]
fn equilibrium_fill_at_capacity_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "[equilibrium]\ns = 2.0\n");
    assert_eq!(code(&carshare(tmp.path(), &["equilibrium", "-c", "run.toml", "-o", "o"])), 2);
}

#[test]
fn set_overrides_file_keys() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "[equilibrium]\ns = 2.0\n");
    let out = carshare(tmp.path(), &["equilibrium", "-c", "run.toml", "-o", "o", "--set", "equilibrium.s=1.0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(&tmp.path().join("o/report.json"))["s"], 1.0);
}

#[test]
fn verify_empty_profile_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let out = carshare(tmp.path(), &["verify", "-o", "o"]);
    assert_eq!(code(&out), 0);
    assert_eq!(read_json(&tmp.path().join("o/verify.json"))["suites"].as_array().unwrap().len(), 0);
}

#[test]
fn verify_identities_profile_passes_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.toml"), "[verify]\nsuites = [\"identities\"]\n").unwrap();
    let start = std::time::Instant::now();
    let out = carshare(tmp.path(), &["verify", "-c", "run.toml", "-o", "o"]);
    assert!(start.elapsed().as_secs() < 10);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = read_json(&tmp.path().join("o/verify.json"));
    assert_eq!(v["passed"], true);
    assert!(tmp.path().join("o/identities.csv").exists());
}

#[test]
fn verify_corrupted_tolerance_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("run.toml"),
        "[verify]\nsuites = [\"identities\"]\n\n[verify.identities]\nseed = 1\ntol = 1e-30\n",
    )
    .unwrap();
    let out = carshare(tmp.path(), &["verify", "-c", "run.toml", "-o", "o"]);
    assert_eq!(code(&out), 1);
    assert_eq!(read_json(&tmp.path().join("o/verify.json"))["passed"], false);
}
