use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_teleop"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn summary(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let last = text.lines().last().unwrap_or_else(|| panic!("no output; stderr: {}", String::from_utf8_lossy(&out.stderr)));
    serde_json::from_str(last).unwrap()
}

struct Served {
    child: Child,
    port: u16,
    ws_port: u16,
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(extra: &[&str]) -> Served {
    let mut child = bin()
        .args(["serve", "--port", "0", "--ws-port", "0"])
        .args(extra)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let ready: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(ready["event"], "ready");
    Served {
        child,
        port: ready["port"].as_u64().unwrap() as u16,
        ws_port: ready["ws_port"].as_u64().unwrap() as u16,
    }
}

#[test]
fn usage_errors_exit_2() {
    let out = bin().arg("retarget").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--input"));
    assert_eq!(bin().arg("warp").output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["bench-latency", "--n", "many"]).output().unwrap().status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3_with_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["retarget", "--input", "/nonexistent.stream", "--out"])
        .arg(dir.path().join("o.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let s = summary(&out);
    assert_eq!(s["ok"], false);
    assert!(s["error"].as_str().unwrap().contains("nonexistent"));
}

#[test]
fn retarget_writes_one_line_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("hand.jsonl");
    let out = bin()
        .args(["retarget", "--hand-model"])
        .arg(fixture("hand12_generic.model"))
        .arg("--input")
        .arg(fixture("tracking_3s.stream"))
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let s = summary(&out);
    assert_eq!((s["ok"].as_bool(), s["frames"].as_u64(), s["failed"].as_u64()), (Some(true), Some(90), Some(0)));
    let lines: Vec<Value> = std::fs::read_to_string(&out_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 90);
    assert_eq!(lines[0]["q"].as_array().unwrap().len(), 12);
}

#[test]
fn ik_solves_reachable_targets_and_flags_others() {
    let dir = tempfile::tempdir().unwrap();
    let targets = dir.path().join("targets.jsonl");
    let out_path = dir.path().join("q.jsonl");
    let model = teleop_core::fixtures::arm7_generic();
    let ee = model.fk(&model.neutral(), "ee").unwrap();
    let near = teleop_io::stream::WirePose::from(&ee);
    let mut shifted = near;
    shifted.p[2] -= 0.05;
    let far = teleop_io::stream::WirePose { p: [5.0, 0.0, 0.0], q: near.q };
    let text: Vec<String> = [near, shifted, far].iter().map(|w| serde_json::to_string(w).unwrap()).collect();
    std::fs::write(&targets, text.join("\n")).unwrap();
    let out = bin().arg("ik").arg("--targets").arg(&targets).arg("--out").arg(&out_path).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let s = summary(&out);
    assert_eq!((s["targets"].as_u64(), s["solved"].as_u64(), s["failed"].as_u64()), (Some(3), Some(2), Some(1)));
    let lines: Vec<Value> = std::fs::read_to_string(&out_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines[1]["position_err"].as_f64().unwrap() <= 1e-4);
    assert!(lines[2]["error"].is_string());
}

#[test]
fn serve_prints_ready_and_stops_after_duration() {
    let out = bin()
        .args(["serve", "--port", "0", "--ws-port", "0", "--deterministic", "--duration-s", "0.2", "--model"])
        .arg(fixture("arm7_hand12.model"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    let ready: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(ready["mode"], "deterministic");
    assert!(ready["port"].as_u64().unwrap() > 0);
}

#[test]
fn teleop_records_and_replay_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let ep = dir.path().join("ep");
    let srv = serve(&["--deterministic"]);
    let out = bin()
        .arg("teleop")
        .arg("--config")
        .arg(fixture("session.toml"))
        .arg("--input")
        .arg(fixture("tracking_3s.stream"))
        .arg("--record")
        .arg(&ep)
        .args(["--addr", &format!("127.0.0.1:{}", srv.port)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let s = summary(&out);
    assert_eq!(s["outcome"], "completed");
    assert_eq!(s["frames"], 90);
    assert_eq!(s["steps_recorded"], 90);
    drop(srv);

    let target = serve(&["--deterministic"]);
    let out = bin()
        .arg("replay")
        .arg("--episode")
        .arg(&ep)
        .args(["--to", &format!("127.0.0.1:{}", target.port)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let s = summary(&out);
    assert_eq!((s["sent"].as_u64(), s["outcome"].as_str()), (Some(90), Some("completed")));
}

#[test]
fn teleop_without_a_server_is_a_runtime_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let out = bin()
        .arg("teleop")
        .arg("--config")
        .arg(fixture("session.toml"))
        .arg("--input")
        .arg(fixture("tracking_3s.stream"))
        .args(["--addr", &format!("127.0.0.1:{port}")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(summary(&out)["ok"], false);
}

#[test]
fn bench_latency_reports_percentiles() {
    let srv = serve(&[]);
    let out = bin()
        .args(["bench-latency", "--n", "300", "--addr", &format!("127.0.0.1:{}", srv.port)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let s = summary(&out);
    assert_eq!(s["n"], 300);
    let (p50, p99) = (s["p50_us"].as_f64().unwrap(), s["p99_us"].as_f64().unwrap());
    assert!(p50 > 0.0 && p50 <= p99);
    assert!(srv.ws_port > 0);
}
