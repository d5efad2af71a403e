use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Stdio};

const DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data");

fn twin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_twin"));
    c.env_remove("TWIN_PORT").env_remove("TWIN_SEED").env("RUST_LOG", "warn");
    c
}

fn code(c: &mut Command) -> i32 {
    let out = c.output().unwrap();
    out.status.code().unwrap_or_else(|| panic!("killed: {}", String::from_utf8_lossy(&out.stderr)))
}

fn data(rel: &str) -> String {
    format!("{DATA}/{rel}")
}

fn header_seed(log: &Path) -> u64 {
    let text = std::fs::read_to_string(log).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    header["seed"].as_u64().unwrap()
}

fn scenario_run(c: &mut Command) -> &mut Command {
    c.args(["run-scenario", "--scenario", &data("scenarios/single_antenna.toml")])
        .args(["--script", &data("scripts/solution_single_antenna.toml")])
}

#[test]
fn run_scenario_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.jsonl");
    assert_eq!(code(scenario_run(&mut twin()).arg("--out").arg(&log)), 0);
    let replay = |extra: &[&str]| {
        code(
            twin()
                .args(["replay", "--scenario", &data("scenarios/single_antenna.toml")])
                .args(extra)
                .arg(&log),
        )
    };
    assert_eq!(replay(&[]), 0);
    // a recording only replays against the config it was made with
    let heavier = dir.path().join("heavier.toml");
    std::fs::write(&heavier, "[physics]\nrover_mass = 31.0\n").unwrap();
    assert_eq!(replay(&["--config", heavier.to_str().unwrap()]), 2);
    assert_eq!(code(twin().arg("report").arg(&log)), 0);
}

#[test]
fn unmet_expectation_is_a_tolerance_failure() {
    let dir = tempfile::tempdir().unwrap();
    let script = std::fs::read_to_string(data("scripts/solution_single_antenna.toml")).unwrap();
    let wrong = script.replace("resets = 1", "resets = 3");
    assert_ne!(script, wrong);
    let path = dir.path().join("wrong.toml");
    std::fs::write(&path, wrong).unwrap();
    let c = &mut twin();
    c.args(["run-scenario", "--scenario", &data("scenarios/single_antenna.toml"), "--script"]).arg(&path);
    assert_eq!(code(c), 4);
}

#[test]
fn config_errors_exit_2() {
    assert_eq!(code(twin().args(["run-scenario", "--config", "/nonexistent.toml"])), 2);
    assert_eq!(code(twin().arg("run-scenario")), 2, "missing --script");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[physics]\nrover_mass = -1\n").unwrap();
    assert_eq!(code(twin().args(["serve", "--headless", "--config"]).arg(&bad)), 2);
}

#[test]
fn unreachable_emulator_exits_3() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    assert_eq!(code(twin().args(["calibrate", "--emulator", &format!("127.0.0.1:{port}")])), 3);
}

#[test]
fn calibrate_recovers_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cal.json");
    let c = &mut twin();
    c.args(["calibrate", "--profile", &data("profiles/test_profile.toml"), "--out"]).arg(&out);
    assert_eq!(code(c), 0);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let ts = doc["corrections"]["torque_scale"].as_f64().unwrap();
    assert!((ts - 0.8).abs() < 0.04, "{ts}");
}

#[test]
fn seed_flag_beats_env() {
    let dir = tempfile::tempdir().unwrap();
    let headless = |seed_env: Option<&str>, seed_flag: Option<&str>, name: &str| {
        let log = dir.path().join(name);
        let mut c = twin();
        c.args(["serve", "--headless", "--script", &data("scripts/course.toml"), "--out"]).arg(&log);
        if let Some(s) = seed_env {
            c.env("TWIN_SEED", s);
        }
        if let Some(s) = seed_flag {
            c.args(["--seed", s]);
        }
        assert_eq!(code(&mut c), 0);
        header_seed(&log)
    };
    assert_eq!(headless(Some("77"), None, "env.jsonl"), 77);
    assert_eq!(headless(Some("77"), Some("5"), "both.jsonl"), 5);
}

#[test]
fn port_flag_beats_env() {
    // occupy the env port: using it would fail with a connection error
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let taken_port = taken.local_addr().unwrap().port().to_string();
    assert_eq!(code(twin().arg("serve").env("TWIN_PORT", &taken_port)), 3);

    let free = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port().to_string();
    let mut child = twin()
        .args(["serve", "--port", &free])
        .env("TWIN_PORT", &taken_port)
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let listening = lines.by_ref().map_while(Result::ok).find(|l| l.contains("listening on"));
    child.kill().unwrap();
    child.wait().unwrap();
    let listening = listening.expect("server did not start");
    assert!(listening.contains(&format!(":{free}")), "{listening}");
}
