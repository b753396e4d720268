//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use bytes::Bytes;
use http::{HeaderValue, Response, StatusCode};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use url::Url;

use psvc::broker::{
    read_endpoint_file, write_endpoint_file, AccessPolicy, Broker, BrokerSettings, PolicyMode, ServiceState,
};
use psvc::demo::{run_scenario, Deployment, DeploymentSpec, CC_SERVICE_ID};
use psvc::net;
use psvc::protocol::{BrokerResult, PsvcError, ServiceHandle, ServiceName, WhiteQuery, YellowQuery};
use psvc::registry::{load_catalog, Catalog, Launcher, ServiceDescriptor};

type Outcome = Result<String, String>;
type Criterion = std::pin::Pin<Box<dyn Future<Output = Outcome>>>;

fn exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_psvc"))
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

async fn within<F: Future<Output = Outcome>>(limit: Duration, f: F) -> Outcome {
    let start = Instant::now();
    let detail = tokio::time::timeout(limit + Duration::from_secs(20), f)
        .await
        .map_err(|_| format!("did not finish within {limit:?}"))??;
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:?}, limit {limit:?}"))?;
    Ok(format!("{detail}; {took:.2?}"))
}

async fn scenario(name: &str) -> Outcome {
    let report = run_scenario(name, &exe()).await.map_err(|e| e.to_string())?;
    if report.passed() {
        Ok(format!("{name} passed {} checks", report.checks.len()))
    } else {
        let failed: Vec<String> = report
            .failures()
            .iter()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        Err(format!("{name}: {}\n{}", failed.join("; "), report.transcript))
    }
}

// 1. End-to-end flow reproduction.
async fn end_to_end() -> Outcome {
    within(Duration::from_secs(10), scenario("eid-auth-happy")).await
}

// 2. Launch on demand, reuse, respawn after a kill.
async fn launch_on_demand() -> Outcome {
    let d = Deployment::start(DeploymentSpec::new(exe())).await.map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut b = d.browser();
        let page = d.authenticate(&mut b).await.map_err(|e| e.to_string())?;
        ensure(page.status == StatusCode::OK, format!("run failed: {}", page.text()))?;
        runs.push(d.service_record().await.ok_or("no runtime record")?);
    }
    ensure(runs[1].launch_count == 1, format!("spawned {} times across two runs", runs[1].launch_count))?;
    ensure(runs[0].state == runs[1].state, "endpoint changed between runs")?;
    let ServiceState::Running { endpoint: first, pid: Some(pid) } = runs[1].state.clone() else {
        return Err(format!("unexpected state {:?}", runs[1].state));
    };

    // SAFETY: plain kill(2) on our own child.
    let rc = unsafe { libc::kill(pid as libc::pid_t, libc::SIGKILL) };
    ensure(rc == 0, "kill failed")?;
    let deadline = Instant::now() + Duration::from_secs(5);
    while tokio::net::TcpStream::connect(first).await.is_ok() {
        ensure(Instant::now() < deadline, "killed service still accepting")?;
        tokio::time::sleep(Duration::from_millis(20)).await;
    }

    let mut b = d.browser();
    let page = d.authenticate(&mut b).await.map_err(|e| e.to_string())?;
    ensure(page.status == StatusCode::OK, format!("run after kill failed: {}", page.text()))?;
    let rec = d.service_record().await.ok_or("no runtime record")?;
    ensure(rec.launch_count == 2, format!("launch count {} after kill", rec.launch_count))?;
    let ServiceState::Running { endpoint: second, .. } = rec.state else {
        return Err("service not running after respawn".into());
    };
    d.shutdown().await;
    Ok(format!("1 spawn for 2 runs; respawned {first} -> {second}"))
}

// 3. Handle unforgeability, round trips and confidentiality.
async fn handle_security() -> Outcome {
    within(Duration::from_secs(5), async {
        let remote = net::serve(net::bind_loopback(0).await.map_err(|e| e.to_string())?, |_, _| async {
            net::text_response(StatusCode::OK, "")
        });
        let remote_url = Url::parse(&format!("http://{}/svc", remote.local_addr())).unwrap();
        let mut catalog = Catalog::new(std::env::temp_dir());
        let id = "CCPersonalService";
        catalog.insert(ServiceDescriptor {
            id: id.into(),
            launcher: Launcher::Remote { url: remote_url.clone() },
            presentation: ServiceName::parse(r#"{"Purpose":"authentication"}"#).unwrap(),
        });
        let broker = Broker::new(catalog, BrokerSettings::default());
        let sp = "sp.example.org:8080";
        let mut rng = StdRng::seed_from_u64(0x5eed);

        for i in 0..10_000 {
            let len = rng.random_range(0..160);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let h = ServiceHandle::from_bytes(&bytes);
            let reply = broker.resolve_handle(&h, sp, "r").await;
            ensure(reply.error == Some(PsvcError::Handle), format!("random handle {i} gave {reply:?}"))?;
        }

        let mut mutations = 0;
        let mut round_trips = 0;
        for i in 0..1_100 {
            let h = broker.mint_handle(sp, id);
            let text = h.as_str();
            ensure(!text.contains(id) && !text.contains(sp), format!("handle leaks plaintext: {text}"))?;
            if i < 100 {
                let reply = broker.resolve_handle(&h, sp, "r").await;
                ensure(reply.error.is_none(), format!("round trip {i} failed: {reply:?}"))?;
                ensure(reply.location == ":r", "wrong location")?;
                ensure(reply.service.as_deref() == Some(remote_url.as_str()), "wrong endpoint")?;
                round_trips += 1;
            }
            let mut raw = URL_SAFE_NO_PAD.decode(text).map_err(|e| e.to_string())?;
            let pos = rng.random_range(0..raw.len());
            raw[pos] ^= rng.random_range(1..=255u8);
            let reply = broker.resolve_handle(&ServiceHandle::from_bytes(&raw), sp, "r").await;
            ensure(reply.error == Some(PsvcError::Handle), format!("mutation {i} gave {reply:?}"))?;
            mutations += 1;
        }
        drop(remote);
        Ok(format!("10000 random + {mutations} mutated rejected, {round_trips} round trips"))
    })
    .await
}

// 4. Listing and resolution against a brute-force oracle.
mod oracle {
    use super::*;

    pub fn fold_eq(a: &str, b: &str) -> bool {
        a.chars().flat_map(char::to_lowercase).eq(b.chars().flat_map(char::to_lowercase))
    }

    pub fn yellow(attr: &str, value: &Value, presentation: &Map<String, Value>) -> bool {
        presentation.iter().any(|(k, v)| {
            fold_eq(k, attr)
                && match (v, value) {
                    (Value::String(a), Value::String(b)) => fold_eq(a, b),
                    (a, b) => a == b,
                }
        })
    }

    pub fn white(query: &Map<String, Value>, presentation: &Map<String, Value>) -> bool {
        query.iter().all(|(k, v)| presentation.get(k) == Some(v))
    }
}

const NAMES: [&str; 8] = ["Purpose", "purpose", "Device", "DEVICE", "Vendor", "Port", "Tags", "Device name"];

fn random_value(rng: &mut StdRng) -> Value {
    const STRINGS: [&str; 8] = [
        "authentication",
        "Authentication",
        "AUTHENTICATION",
        "signing",
        "eID",
        "EID",
        "Cartão de Cidadão",
        "CARTÃO DE CIDADÃO",
    ];
    match rng.random_range(0..10) {
        0..=5 => json!(STRINGS[rng.random_range(0..STRINGS.len())]),
        6 => json!(rng.random_range(0..3)),
        7 => json!(rng.random_bool(0.5)),
        8 => [json!(["a"]), json!(["A"]), json!(null)][rng.random_range(0..3)].clone(),
        _ => json!({"k": STRINGS[rng.random_range(0..2)]}),
    }
}

fn flip_case(s: &str, rng: &mut StdRng) -> String {
    s.chars()
        .map(|c| {
            if rng.random_bool(0.5) {
                c.to_uppercase().collect::<String>()
            } else {
                c.to_lowercase().collect::<String>()
            }
        })
        .collect()
}

async fn matching_oracle() -> Outcome {
    within(Duration::from_secs(10), async {
        let mut rng = StdRng::seed_from_u64(42);
        let sp = "sp.test:80";
        let (mut listings, mut resolutions, mut ambiguous, mut none) = (0, 0, 0, 0);
        for round in 0..500 {
            let n = rng.random_range(1..=10);
            let mut catalog = Catalog::new(std::env::temp_dir());
            let mut per_service = std::collections::HashMap::new();
            let mut entries: BTreeMap<String, (Map<String, Value>, bool)> = BTreeMap::new();
            for i in 0..n {
                let mut attrs = Map::new();
                for _ in 0..rng.random_range(1..=6) {
                    attrs.insert(NAMES[rng.random_range(0..NAMES.len())].to_owned(), random_value(&mut rng));
                }
                let id = format!("svc{i:02}");
                let blocked = rng.random_bool(0.2);
                if blocked {
                    per_service.insert(id.clone(), PolicyMode::Blacklist(vec!["sp.test".into()]));
                }
                catalog.insert(ServiceDescriptor {
                    id: id.clone(),
                    launcher: Launcher::Remote {
                        url: Url::parse("http://127.0.0.1:9/").unwrap(),
                    },
                    presentation: ServiceName::from_map(attrs.clone()),
                });
                entries.insert(id, (attrs, blocked));
            }
            let settings = BrokerSettings {
                policy: AccessPolicy {
                    default: PolicyMode::AllowAll,
                    per_service,
                },
                ..Default::default()
            };
            let broker = Broker::new(catalog, settings);
            let visible: Vec<(&String, &Map<String, Value>)> =
                entries.iter().filter(|(_, (_, b))| !b).map(|(id, (a, _))| (id, a)).collect();
            let pick = |rng: &mut StdRng| -> &Map<String, Value> {
                let keys: Vec<&String> = entries.keys().collect();
                &entries[keys[rng.random_range(0..keys.len())]].0
            };

            for _ in 0..10 {
                // Yellow: usually an existing pair with case noise.
                let (attr, value) = if rng.random_bool(0.8) {
                    let attrs = pick(&mut rng);
                    let (k, v) = attrs.iter().nth(rng.random_range(0..attrs.len())).unwrap();
                    let v = match v {
                        Value::String(s) => json!(flip_case(s, &mut rng)),
                        other => other.clone(),
                    };
                    (flip_case(k, &mut rng), v)
                } else {
                    (NAMES[rng.random_range(0..NAMES.len())].to_owned(), random_value(&mut rng))
                };
                let expected: Vec<ServiceName> = visible
                    .iter()
                    .filter(|(_, p)| oracle::yellow(&attr, &value, p))
                    .map(|(_, p)| ServiceName::from_map((*p).clone()))
                    .collect();
                let q = YellowQuery::new(attr.clone(), value.clone());
                match broker.yellow_pages(&q, sp) {
                    BrokerResult::YellowPages { response, .. } => ensure(
                        response == expected,
                        format!("round {round}: yellow {attr}={value} gave {response:?}, oracle {expected:?}"),
                    )?,
                    other => return Err(format!("yellow produced {other:?}")),
                }
                listings += 1;

                // White: a subset of an existing name, or random attributes.
                let mut query = Map::new();
                if rng.random_bool(0.8) {
                    let attrs = pick(&mut rng);
                    for (k, v) in attrs {
                        if query.is_empty() || rng.random_bool(0.5) {
                            query.insert(k.clone(), v.clone());
                        }
                    }
                } else {
                    query.insert(NAMES[rng.random_range(0..NAMES.len())].to_owned(), random_value(&mut rng));
                }
                let matches: Vec<&String> =
                    visible.iter().filter(|(_, p)| oracle::white(&query, p)).map(|(id, _)| *id).collect();
                let wq = WhiteQuery::new(ServiceName::from_map(query.clone())).unwrap();
                let got = broker.white_pages(&wq, sp);
                match (matches.len(), got) {
                    (0, Err(PsvcError::Service)) => none += 1,
                    (n, Err(PsvcError::Ambiguous)) if n >= 2 => ambiguous += 1,
                    (1, Ok(BrokerResult::WhitePages { response: Some(r), .. })) => {
                        let opened = broker.open_handle(&r.handle, sp).map_err(|e| e.to_string())?;
                        ensure(&opened.id == matches[0], format!("handle names {} not {}", opened.id, matches[0]))?;
                        ensure(r.service.as_map() == &entries[matches[0]].0, "wrong presentation returned")?;
                        resolutions += 1;
                    }
                    (n, got) => return Err(format!("round {round}: white {query:?}: oracle {n} matches, broker {got:?}")),
                }
            }
        }
        Ok(format!(
            "{listings} listings, {resolutions} resolutions, {ambiguous} ambiguous, {none} no-match"
        ))
    })
    .await
}

// 5. Error-path conformance.
async fn error_paths() -> Outcome {
    let mut seen = Vec::new();
    for name in ["error-parameters", "error-ambiguous", "error-handle", "error-service", "broker-down"] {
        scenario(name).await?;
        seen.push(name);
    }
    Ok(format!("{} scenarios", seen.len()))
}

// 6. 313 restriction.
async fn only_broker_313() -> Outcome {
    scenario("malicious-313").await
}

// 7. Header and body fidelity on 312.
async fn fidelity() -> Outcome {
    let d = Deployment::start(DeploymentSpec::new(exe())).await.map_err(|e| e.to_string())?;
    let broker = d.broker().ok_or("no broker")?.clone();
    let mut rng = StdRng::seed_from_u64(7);

    let headers: Vec<(String, String)> = (0..20)
        .map(|i| {
            let len = rng.random_range(1..40);
            let mut v: String = (0..len).map(|_| rng.random_range(0x21u8..0x7f) as char).collect();
            if i % 3 == 0 {
                v = format!("{v} and {v}");
            }
            (format!("x-fidelity-{i:02}-{:04x}", rng.random::<u16>()), v)
        })
        .collect();
    let body: Vec<u8> = (0..64 * 1024).map(|_| rng.random()).collect();
    let digest = hex::encode(Sha256::digest(&body));

    let listener = net::bind_loopback(0).await.map_err(|e| e.to_string())?;
    let sp_addr = listener.local_addr().unwrap();
    let handle = broker.mint_handle(&sp_addr.to_string(), CC_SERVICE_ID);
    let (h2, b2) = (headers.clone(), Bytes::from(body));
    let sp = net::serve(listener, move |_, _| {
        let (headers, body, handle) = (h2.clone(), b2.clone(), handle.clone());
        async move {
            let mut r = Response::new(body);
            *r.status_mut() = StatusCode::from_u16(312).unwrap();
            let h = r.headers_mut();
            h.insert("psvc-service", HeaderValue::from_str(handle.as_str()).unwrap());
            h.insert("psvc-method", HeaderValue::from_static("POST"));
            h.insert("psvc-parameters", HeaderValue::from_static("/echo"));
            for (n, v) in &headers {
                h.insert(http::HeaderName::from_bytes(n.as_bytes()).unwrap(), HeaderValue::from_str(v).unwrap());
            }
            r
        }
    });

    let sp_url = Url::parse(&format!("http://{sp_addr}/invoke")).unwrap();
    let page = d.browser().get(&sp_url).await.map_err(|e| e.to_string())?;
    ensure(page.status == StatusCode::OK, format!("invocation failed: {} {}", page.status, page.text()))?;
    let echo: Value = serde_json::from_slice(&page.body).map_err(|e| e.to_string())?;
    let received: Vec<(String, String)> = serde_json::from_value(echo["headers"].clone()).map_err(|e| e.to_string())?;
    let get = |name: &str| -> Vec<&String> { received.iter().filter(|(n, _)| n == name).map(|(_, v)| v).collect() };
    for (n, v) in &headers {
        ensure(get(n) == vec![v], format!("header {n} arrived as {:?}", get(n)))?;
    }
    ensure(echo["method"] == "POST", "method not taken from PSvc-Method")?;
    ensure(echo["body_len"] == 64 * 1024, format!("body length {}", echo["body_len"]))?;
    ensure(echo["body_sha256"] == digest.as_str(), "body digest differs")?;
    ensure(get("referer") == vec![sp_url.as_str()], format!("referer {:?}", get("referer")))?;
    drop(sp);
    d.shutdown().await;
    Ok("20 headers, 64 KiB body, Referer added".into())
}

// 8. Configuration files.
const PAPER_DESCRIPTOR: &str = r#"{
  "configuration" : {
    "dir": "Z:/PersonalServices/CCPersonalService",
    "cmd": [
      "java",
      "-jar",
      "CCPersonalService.jar"
    ]
  },
  "presentation": {
    "Purpose": "authentication",
    "Credentials": "digital signature",
    "Protocol": "certificate + digital signature",
    "Device": "Portuguese eID",
    "Device name": "Cartão de Cidadão"
  }
}
"#;

async fn config_files() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ps = tmp.path().join(".PS");
    std::fs::create_dir(&ps).map_err(|e| e.to_string())?;

    let ept = ps.join("broker.ept");
    write_endpoint_file(&ept, 12346).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&ept).map_err(|e| e.to_string())?;
    ensure(text == "12346", format!("broker.ept holds {text:?}"))?;
    let addr = read_endpoint_file(&ept).map_err(|e| e.to_string())?;
    ensure(addr.to_string() == "127.0.0.1:12346", format!("read back {addr}"))?;

    std::fs::write(ps.join("CCPersonalService.psd"), PAPER_DESCRIPTOR).map_err(|e| e.to_string())?;
    let (catalog, diagnostics) = load_catalog(&ps).map_err(|e| e.to_string())?;
    ensure(diagnostics.is_empty(), format!("{diagnostics:?}"))?;
    let entry = catalog.get("CCPersonalService").ok_or("descriptor not ingested")?;
    ensure(
        entry.presentation.get("Device name") == Some(&json!("Cartão de Cidadão")),
        "non-ASCII value altered",
    )?;
    let Launcher::Local { cmd, .. } = &entry.launcher else {
        return Err("expected a local launcher".into());
    };
    ensure(cmd == &["java", "-jar", "CCPersonalService.jar"], format!("cmd {cmd:?}"))?;

    let (broker, _) = Broker::open(&ps).map_err(|e| e.to_string())?;
    let q = WhiteQuery::parse(r#"{"Purpose":"authentication","Device":"Portuguese eID"}"#).unwrap();
    let sp = "127.0.0.1:8080";
    let Ok(BrokerResult::WhitePages { response: Some(r), .. }) = broker.white_pages(&q, sp) else {
        return Err("white query did not resolve".into());
    };
    let opened = broker.open_handle(&r.handle, sp).map_err(|e| e.to_string())?;
    ensure(opened.id == "CCPersonalService", "resolved to the wrong service")?;

    // A running Broker advertises its real port the same way.
    let running = Arc::new(broker).listen(0, true).await.map_err(|e| e.to_string())?;
    let advertised = read_endpoint_file(&ept).map_err(|e| e.to_string())?;
    ensure(advertised == running.local_addr(), "advertised endpoint differs from the listener")?;
    drop(running);
    Ok("broker.ept round trip; descriptor resolved by the two-attribute query".into())
}

fn main() {
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 end-to-end flow", Box::pin(end_to_end())),
        ("2 launch on demand", Box::pin(launch_on_demand())),
        ("3 handle security", Box::pin(handle_security())),
        ("4 matching oracle", Box::pin(matching_oracle())),
        ("5 error paths", Box::pin(error_paths())),
        ("6 313 restriction", Box::pin(only_broker_313())),
        ("7 header/body fidelity", Box::pin(fidelity())),
        ("8 config files", Box::pin(config_files())),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match rt.block_on(f) {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
