mod common;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use common::*;
use plantpulse_ingest::{Store, StreamId};
use plantpulse_mqtt::client::{Client, ClientOptions};
use plantpulse_mqtt::QoS;
use serde_json::{json, Value};
use tokio::time::{sleep, Instant};

const ALL: [&str; 7] = ["broker", "emulator", "ingest", "bridge", "esp32", "environment", "api"];

#[test]
fn check_config_exit_codes() {
    let ok = Sandbox::new(json!({}));
    let (code, out, _) = ok.run_cli(&["check-config", ok.config.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("is valid"));
    assert!(!out.contains("admin-pw"), "plaintext password printed");

    let dup = Sandbox::new(json!({"api": {"bind": "127.0.0.1:1883"}, "broker": {"bind": "127.0.0.1:1883"}}));
    let (code, _, err) = dup.run_cli(&["check-config", dup.config.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("broker.bind") && err.contains("api.bind"), "{err}");

    let wild = Sandbox::new(json!({"devices": {"topics": {"esp32": "plant/#"}, "periods": {"industrial": -1}}}));
    let (code, _, err) = wild.run_cli(&["check-config", wild.config.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("devices.topics.esp32") && err.contains("devices.periods.industrial"), "{err}");

    let (code, _, err) = ok.run_cli(&["check-config", "/nonexistent/plantpulse.json"]);
    assert_eq!(code, 2);
    assert!(err.contains("not found"), "{err}");

    let (code, _, _) = ok.run_cli(&["run", "--config", ok.config.to_str().unwrap(), "--only", "broker,meter"]);
    assert_eq!(code, 2);
}

#[test]
fn seed_initialises_then_refuses_then_forces() {
    let sb = Sandbox::new(json!({}));
    let (code, out, err) = sb.seed(&[]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("2 users and 0 samples"), "{out}");
    let data = sb.data();
    for s in StreamId::ALL {
        assert!(data.join(s.as_str()).is_dir(), "{s} missing");
    }
    {
        let store = Store::open_reader(&data).unwrap();
        for s in StreamId::ALL {
            assert_eq!(store.count(s), 0);
        }
    }
    let users: Vec<Value> = serde_json::from_slice(&std::fs::read(data.join("users.json")).unwrap()).unwrap();
    let names: Vec<&str> = users.iter().map(|u| u["user"].as_str().unwrap()).collect();
    assert_eq!(names, ["admin", "viewer"]);
    assert!(users.iter().all(|u| u.get("password").is_none() && u["password_hash"].as_str().unwrap().starts_with("iter-sha256$")));

    let before = std::fs::read(data.join("users.json")).unwrap();
    let (code, _, err) = sb.seed(&["--fixture", FIXTURE]);
    assert_eq!(code, 1);
    assert!(err.contains("--force"), "{err}");
    assert_eq!(std::fs::read(data.join("users.json")).unwrap(), before);
    assert_eq!(Store::open_reader(&data).unwrap().count(StreamId::Esp32Energy), 0);

    let (code, out, err) = sb.seed(&["--force", "--fixture", FIXTURE]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("17 samples"), "{out}");
    let store = Store::open_reader(&data).unwrap();
    assert_eq!(store.count(StreamId::Esp32Energy), 8);
    assert_eq!(store.count(StreamId::IndustrialEnergy), 9);
    drop(store);
    // Samples now present: refusal again, data untouched.
    std::fs::remove_file(data.join("users.json")).unwrap();
    assert_eq!(sb.seed(&[]).0, 1);
    assert_eq!(Store::open_reader(&data).unwrap().count(StreamId::Esp32Energy), 8);
}

#[tokio::test]
async fn run_all_reports_health_and_stops_cleanly() {
    let sb = Sandbox::new(json!({"devices": {"periods": {"esp32": 0.3, "industrial": 0.4, "environment": 0.5}}}));
    let mut proc = sb.spawn_run(&["--all"], "run.log");
    let client = http();
    let health = wait_healthz(&client, sb.api, Duration::from_secs(15)).await.expect("healthz");
    let components = health["components"].as_object().unwrap();
    for name in ALL {
        assert!(components.contains_key(name), "{name} missing from {health}");
    }
    // Let every device publish a few times, then check the store through the API.
    let tok = token(&client, sb.api).await;
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let streams: Value = client.get(sb.url("/api/streams")).bearer_auth(&tok).send().await.unwrap().json().await.unwrap();
        let counts: Vec<u64> = streams.as_array().unwrap().iter().map(|s| s["count"].as_u64().unwrap()).collect();
        if counts.iter().all(|&c| c >= 3) {
            break;
        }
        assert!(Instant::now() < deadline, "counts stuck at {counts:?}");
        sleep(Duration::from_millis(100)).await;
    }
    let health: Value = client.get(sb.url("/healthz")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok", "{health}");

    let stopped_at = Instant::now();
    proc.sigterm();
    let status = proc.wait_exit(Duration::from_secs(5)).await.expect("exit after SIGTERM");
    assert_eq!(status.code(), Some(0));
    assert!(stopped_at.elapsed() < Duration::from_secs(2), "shutdown took {:?}", stopped_at.elapsed());
    let store = Store::open(sb.data()).unwrap();
    assert_eq!(store.recovery_stats().truncated_bytes, 0);
    assert!(store.recovery_stats().quarantined.is_empty());
    let log = sb.log("run.log");
    let order: Vec<usize> = ["component_stopped - api", "component_stopped - ingest", "component_stopped - broker"]
        .iter()
        .map(|m| log.find(m).unwrap_or_else(|| panic!("{m} not logged")))
        .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]), "shutdown not in reverse order");
}

#[tokio::test]
async fn only_broker_and_esp32_leaves_api_absent() {
    let sb = Sandbox::new(json!({"devices": {"periods": {"esp32": 0.2}}}));
    let mut proc = sb.spawn_run(&["--only", "broker,esp32"], "run.log");
    let status = wait_status(&sb.data(), Duration::from_secs(15), |s| all_running(s, &["broker", "esp32"])).await;
    let status = status.expect("broker and esp32 running");
    assert_eq!(status["components"].as_object().unwrap().len(), 2);

    let seen = Arc::new(Mutex::new(Vec::new()));
    let sub = Client::connect(ClientOptions::new(sb.broker, "observer")).await.unwrap();
    let s = seen.clone();
    sub.subscribe("plant/#", QoS::AtMostOnce, move |topic, _| s.lock().unwrap().push(topic.to_owned())).await.unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    while seen.lock().unwrap().len() < 3 {
        assert!(Instant::now() < deadline, "esp32 not publishing");
        sleep(Duration::from_millis(20)).await;
    }
    assert!(seen.lock().unwrap().iter().all(|t| t == "plant/energy/esp32"));
    assert!(http().get(sb.url("/healthz")).send().await.is_err(), "api answered");
    sub.disconnect().await;

    proc.sigterm();
    assert_eq!(proc.wait_exit(Duration::from_secs(5)).await.and_then(|s| s.code()), Some(0));
}

#[tokio::test]
async fn missing_dependency_is_a_startup_failure() {
    // No broker: the device never becomes ready.
    let sb = Sandbox::new(json!({}));
    let started = Instant::now();
    let mut proc = sb.spawn_run(&["--only", "esp32"], "run.log");
    let status = proc.wait_exit(Duration::from_secs(20)).await.expect("exits");
    assert_eq!(status.code(), Some(1));
    assert!(started.elapsed() >= Duration::from_secs(9), "{:?}", started.elapsed());
    assert!(sb.log("run.log").contains("startup_failed - esp32"));
    assert_eq!(read_status(&sb.data()).unwrap()["components"]["esp32"]["state"], "failed");
}

fn ingest_pid(status: &Value) -> Option<u64> {
    (status["components"]["ingest"]["state"] == "running").then(|| status["components"]["ingest"]["pid"].as_u64()).flatten()
}

#[tokio::test]
async fn killed_child_is_restarted_and_data_resumes() {
    let sb = Sandbox::new(json!({"devices": {"periods": {"esp32": 0.2, "industrial": 0.25, "environment": 0.3}}}));
    let mut proc = sb.spawn_run(&["--all", "--separate-processes"], "run.log");
    let data = sb.data();
    let status = wait_status(&data, Duration::from_secs(30), |s| all_running(s, &ALL)).await.expect("all running");
    let pids: BTreeMap<&str, u64> = ALL.iter().map(|n| (*n, status["components"][n]["pid"].as_u64().unwrap())).collect();
    assert!(pids.values().all(|&p| p != proc.pid() as u64));
    assert_eq!(pids.values().collect::<std::collections::BTreeSet<_>>().len(), ALL.len());

    let client = http();
    wait_healthz(&client, sb.api, Duration::from_secs(5)).await.expect("healthz");
    let tok = token(&client, sb.api).await;
    let count = |client: reqwest::Client, tok: String, url: String| async move {
        let v: Value = client.get(url).bearer_auth(tok).send().await.unwrap().json().await.unwrap();
        v.as_array().unwrap().iter().find(|s| s["id"] == "esp32_energy").unwrap()["count"].as_u64().unwrap()
    };
    sleep(Duration::from_secs(1)).await;
    let before = count(client.clone(), tok.clone(), sb.url("/api/streams")).await;
    assert!(before > 0);

    let old = pids["ingest"];
    signal(old as u32, libc::SIGKILL);
    let status = wait_status(&data, Duration::from_secs(15), |s| {
        ingest_pid(s).is_some_and(|p| p != old) && s["components"]["ingest"]["restarts"] == 1
    })
    .await
    .expect("ingest restarted");
    for n in ALL.iter().filter(|n| **n != "ingest") {
        assert_eq!(status["components"][n]["pid"].as_u64(), Some(pids[n]), "{n} restarted too");
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while count(client.clone(), tok.clone(), sb.url("/api/streams")).await < before + 5 {
        assert!(Instant::now() < deadline, "samples did not resume");
        sleep(Duration::from_millis(100)).await;
    }
    // The gap shows only as missing samples: seqs stay gapless.
    let page: Value = client
        .get(sb.url("/api/streams/esp32_energy/range?limit=10000"))
        .bearer_auth(&tok)
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let seqs: Vec<u64> = page["rows"].as_array().unwrap().iter().map(|r| r["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());

    proc.sigterm();
    assert_eq!(proc.wait_exit(Duration::from_secs(10)).await.and_then(|s| s.code()), Some(0));
    sleep(Duration::from_millis(200)).await;
    for (n, pid) in pids.iter().filter(|(n, _)| **n != "ingest") {
        // SAFETY: signal 0 only probes for existence.
        assert_ne!(unsafe { libc::kill(*pid as libc::pid_t, 0) }, 0, "{n} child still alive");
    }
    assert_eq!(Store::open(&data).unwrap().recovery_stats().truncated_bytes, 0);
}

#[tokio::test]
async fn repeated_crashes_end_in_exit_1() {
    let sb = Sandbox::new(json!({}));
    let mut proc = sb.spawn_run(&["--only", "broker,ingest", "--separate-processes"], "run.log");
    let data = sb.data();
    let mut last = None;
    for round in 0..6 {
        let status = wait_status(&data, Duration::from_secs(30), |s| ingest_pid(s).is_some_and(|p| Some(p) != last)).await;
        let pid = ingest_pid(&status.unwrap_or_else(|| panic!("round {round}: ingest not back"))).unwrap();
        signal(pid as u32, libc::SIGKILL);
        last = Some(pid);
    }
    let status = proc.wait_exit(Duration::from_secs(30)).await.expect("supervisor gave up");
    assert_eq!(status.code(), Some(1));
    assert!(sb.log("run.log").contains("crash_loop - ingest"));
    let file = read_status(&data).unwrap();
    assert_eq!(file["components"]["ingest"]["state"], "failed");
    assert_eq!(file["components"]["ingest"]["restarts"], 5);
}
