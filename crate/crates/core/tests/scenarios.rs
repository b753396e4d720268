use std::path::Path;

use psvc::demo::{run_scenario, SCENARIOS};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn every_scenario_passes() {
    let exe = Path::new(env!("CARGO_BIN_EXE_psvc"));
    let mut failed = Vec::new();
    for name in SCENARIOS {
        let report = run_scenario(name, exe).await.unwrap();
        if !report.passed() {
            failed.push(format!("{name}: {:?}\n{}", report.failures(), report.transcript));
        }
    }
    assert!(failed.is_empty(), "{}", failed.join("\n"));
}

#[tokio::test]
async fn unknown_scenario_is_an_error() {
    assert!(run_scenario("nope", Path::new("/bin/false")).await.is_err());
}
