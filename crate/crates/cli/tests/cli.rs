use std::fs;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use tempfile::TempDir;

fn alod() -> Command {
    Command::new(env!("CARGO_BIN_EXE_alod"))
}

fn run(args: &[&str]) -> Output {
    alod().args(args).output().expect("spawn alod")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "alod {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

const SMALL: &str = r#"{"loop": {"world": {"num_images": 100}, "initial_size": 20, "cycles": 3, "budget": 10}}"#;

#[test]
fn generate_writes_world_and_twice_as_many_auxiliary_records() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("gen");
    ok(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(lines(&out.join("world.jsonl")), 100);
    assert_eq!(lines(&out.join("auxiliary.jsonl")), 200);
    assert!(out.join("held_out.jsonl").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn generate_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&[
            "generate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "5",
            "--out",
            dir.to_str().unwrap(),
        ]);
    }
    for name in ["world.jsonl", "held_out.jsonl", "auxiliary.jsonl", "backgrounds.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{"loop": {"cycels": 3}}"#);
    let out = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cycels"), "{err}");
}

#[test]
fn invalid_values_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["simulate", "--budget", "0", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["simulate", "--strategy", "greedy"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = run(&["simulate", "--config", "/nonexistent/alod.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn print_config_dumps_defaults_with_overrides() {
    let out = ok(&["--print-config", "--cycles", "7", "--seed", "3", "--seed", "4"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["loop"]["cycles"], 7);
    assert_eq!(v["loop"]["budget"], 50);
    assert_eq!(v["loop"]["delta"], 0.7);
    assert_eq!(v["loop"]["seeds"], serde_json::json!([3, 4]));
    assert_eq!(v["loop"]["strategy"], "product");

    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("dumped.json");
    fs::write(&cfg, &out.stdout).unwrap();
    let again = ok(&["--print-config", "--config", cfg.to_str().unwrap()]);
    assert_eq!(again.stdout, out.stdout);
}

#[test]
fn simulate_writes_one_report_per_cycle_plus_warm_start() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("sim");
    ok(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    let run = out.join("seed_2");
    for t in 0..=3 {
        assert!(run.join(format!("reports/cycle_{t}.json")).exists(), "cycle {t}");
    }
    assert!(!run.join("reports/cycle_4.json").exists());
    for t in 1..=3 {
        assert!(run.join(format!("scores/cycle_{t}.csv")).exists());
    }
    assert_eq!(lines(&run.join("curves.csv")), 5);
    assert!(run.join("cost_audit.json").exists());
}

fn acquired(run: &Path, cycles: usize) -> Vec<u64> {
    let mut ids = Vec::new();
    for t in 1..=cycles {
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run.join(format!("reports/cycle_{t}.json"))).unwrap()).unwrap();
        ids.extend(
            report["acquired"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_u64().unwrap()),
        );
    }
    ids.sort_unstable();
    ids
}

#[test]
fn uniform_and_product_acquire_different_images() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let mut sets = Vec::new();
    for strategy in ["uniform", "product"] {
        let out = tmp.path().join(strategy);
        ok(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
            "--strategy",
            strategy,
            "--out",
            out.to_str().unwrap(),
        ]);
        sets.push(acquired(&out.join("seed_9"), 3));
    }
    assert_eq!(sets[0].len(), 30);
    assert_eq!(sets[1].len(), 30);
    assert_ne!(sets[0], sets[1]);
}

#[test]
fn compare_writes_summary_that_round_trips() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("cmp");
    let args = [
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "1",
        "--seed",
        "2",
        "--strategy",
        "product",
        "--strategy",
        "uniform",
        "--out",
        out.to_str().unwrap(),
    ];
    let printed = ok(&args);
    let stdout = String::from_utf8_lossy(&printed.stdout);
    assert!(stdout.contains("product") && stdout.contains("uniform"), "{stdout}");

    let mut reader = csv::Reader::from_path(out.join("comparison.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    // 2 strategies x 2 seeds x (T + 1) points
    assert_eq!(rows.len(), 2 * 2 * 4);
    assert!(headers.iter().any(|h| h == "strategy"));
    let summary = csv::Reader::from_path(out.join("summary.csv"))
        .unwrap()
        .into_records()
        .count();
    assert_eq!(summary, 2 * 4);

    let first = fs::read(out.join("comparison.csv")).unwrap();
    ok(&args);
    assert_eq!(fs::read(out.join("comparison.csv")).unwrap(), first);
}

#[test]
fn compare_needs_two_strategies() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{"strategies": ["product"]}"#);
    let out = run(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn collect_csvs(dir: &Path, acc: &mut Vec<(PathBuf, Vec<u8>)>, root: &Path) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_csvs(&p, acc, root);
        } else if p.extension().is_some_and(|e| e == "csv") {
            acc.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
}

#[test]
fn simulate_csvs_are_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        ok(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "4",
            "--out",
            out.to_str().unwrap(),
        ]);
        let mut csvs = Vec::new();
        collect_csvs(&out, &mut csvs, &out);
        outputs.push(csvs);
    }
    assert_eq!(outputs[0].len(), 4);
    assert_eq!(outputs[0], outputs[1]);
}

struct Server {
    child: Child,
    out: PathBuf,
}

impl Server {
    fn start(out: &Path, extra: &[&str]) -> (Server, String) {
        let mut args = vec!["serve", "--port", "0", "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let child = alod()
            .args(&args)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let server = Server {
            child,
            out: out.to_path_buf(),
        };
        let deadline = Instant::now() + Duration::from_secs(60);
        let addr_file = out.join("address.json");
        loop {
            if let Ok(text) = fs::read_to_string(&addr_file) {
                if let Ok(addr) = serde_json::from_str::<String>(&text) {
                    return (server, addr);
                }
            }
            assert!(Instant::now() < deadline, "server did not start");
            std::thread::sleep(Duration::from_millis(50));
        }
    }

    fn interrupt(mut self) -> serde_json::Value {
        let pid = self.child.id().to_string();
        let status = Command::new("kill").args(["-INT", &pid]).status().unwrap();
        assert!(status.success());
        let exit = self.child.wait().unwrap();
        assert!(exit.success(), "{exit:?}");
        serde_json::from_str(&fs::read_to_string(self.out.join("manifest.json")).unwrap()).unwrap()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
    }
}

fn get(addr: &str, path: &str) -> serde_json::Value {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(
        stream,
        "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let body = response.split("\r\n\r\n").nth(1).unwrap();
    serde_json::from_str(body).unwrap()
}

#[test]
fn serve_reports_status_and_writes_manifest_on_interrupt() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("serve");
    let (server, addr) = Server::start(&out, &["--config", cfg.to_str().unwrap()]);
    let status = get(&addr, "/api/status");
    assert_eq!(status["mode"], "live");
    assert_eq!(status["t"], 0);
    assert_eq!(status["pending"], 10);
    let queue = get(&addr, "/api/queue");
    assert_eq!(queue.as_array().unwrap().len(), 10);

    let manifest = server.interrupt();
    assert_eq!(manifest["command"], "serve");
    assert_eq!(manifest["status"]["t"], 0);
    assert_eq!(manifest["completed"], false);
    assert!(out.join("run/curves.csv").exists());
}

#[test]
fn serve_with_simulated_annotator_completes_batches() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"simulate_interval_ms": 20, "loop": {"world": {"num_images": 100}, "initial_size": 20, "cycles": 3, "budget": 10}}"#,
    );
    let out = tmp.path().join("serve");
    let (server, addr) = Server::start(&out, &["--config", cfg.to_str().unwrap(), "--simulate-annotator"]);
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let status = get(&addr, "/api/status");
        if status["terminal"] == true {
            assert_eq!(status["t"], 3);
            break;
        }
        assert!(Instant::now() < deadline, "batches not completed: {status}");
        std::thread::sleep(Duration::from_millis(50));
    }
    let manifest = server.interrupt();
    assert_eq!(manifest["completed"], true);
    assert_eq!(manifest["status"]["t"], 3);
}

#[test]
fn serve_fails_on_port_in_use() {
    let tmp = TempDir::new().unwrap();
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port().to_string();
    let cfg = write_config(tmp.path(), SMALL);
    let out = run(&[
        "serve",
        "--config",
        cfg.to_str().unwrap(),
        "--port",
        &port,
        "--out",
        tmp.path().join("s").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&port));
}
