use std::process::Command;
use std::time::{Duration, Instant};

fn psvc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_psvc"))
}

#[test]
fn lint_reports_problems_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("Good.psd");
    let bad = dir.path().join("Bad.psd");
    std::fs::write(
        &good,
        r#"{"configuration":{"cmd":["java","-jar","x.jar"]},"presentation":{"Purpose":"authentication"}}"#,
    )
    .unwrap();
    std::fs::write(&bad, r#"{"configuration":{"cmd":[],"url":"ftp://x/"},"presentation":{}}"#).unwrap();

    let out = psvc().arg("lint").arg(&good).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok"));

    let out = psvc().arg("lint").arg(&good).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.contains("Bad.psd")).count() >= 2, "{text}");
}

#[test]
fn demo_service_needs_a_port() {
    for args in [&[][..], &["notaport"][..], &["0"][..]] {
        let out = psvc().args(["demo", "service"]).args(args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn broker_run_advertises_its_port() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = psvc()
        .arg("--ps-dir")
        .arg(dir.path())
        .args(["--log-level", "warn", "broker", "run"])
        .stdout(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let ept = dir.path().join("broker.ept");
    let deadline = Instant::now() + Duration::from_secs(10);
    let text = loop {
        if let Ok(t) = std::fs::read_to_string(&ept) {
            if !t.is_empty() {
                break t;
            }
        }
        assert!(Instant::now() < deadline, "broker.ept never appeared");
        std::thread::sleep(Duration::from_millis(20));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    let port: u16 = text.trim().parse().unwrap();
    assert_ne!(port, 0);
}

#[test]
fn scenario_command_runs_one_scenario() {
    let out = psvc().args(["--log-level", "warn", "scenario", "error-handle"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.starts_with("PASS error-handle"), "{text}");
    let out = psvc().args(["scenario", "no-such-thing"]).output().unwrap();
    assert!(!out.status.success());
}
