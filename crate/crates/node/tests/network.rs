//! Nodes driven over real TCP against a running coordinator server.

use std::time::{Duration, Instant};

use colearn_coordinator::config::ServerConfig;
use colearn_coordinator::server::{self, RunningServer};
use colearn_core::aggregation::Weighting;
use colearn_core::data::Dataset;
use colearn_core::model::{ModelSpec, TrainConfig};
use colearn_core::privacy::PrivacyConfig;
use colearn_core::rng::normal_at;
use colearn_core::task::{Scheme, TaskSpec};
use colearn_node::driver::{run_node, DriverConfig, NodeError};
use colearn_node::{Finish, NodeReport, NodeSetup, Randomness};

fn blobs(n: usize, seed: u64) -> Dataset {
    let mut x = Vec::with_capacity(n * 3);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        for d in 0..3 {
            let centre = if d == c { 2.0 } else { 0.0 };
            x.push(centre + 0.5 * normal_at(seed, (i * 3 + d) as u64));
        }
        y.push(c);
    }
    Dataset::new(x, 3, y, 3, "blobs")
}

fn spec(id: &str, scheme: Scheme, secure: bool, k: usize) -> TaskSpec {
    TaskSpec {
        task_id: id.into(),
        title: "net test".into(),
        description: String::new(),
        model: ModelSpec::new(3, 4, 3, 2),
        train: TrainConfig {
            batch_size: 10,
            epochs_per_round: 1,
            learning_rate: 0.2,
            shuffle_seed: 3,
        },
        privacy: PrivacyConfig::disabled(),
        scheme,
        secure_aggregation: secure,
        weighting: Weighting::Samples,
        min_participants: k,
        ready_threshold: k,
        total_rounds: 3,
        round_deadline_secs: 20,
    }
}

async fn start_server(dir: &std::path::Path) -> RunningServer {
    let cfg = ServerConfig {
        wire_addr: "127.0.0.1:0".parse().unwrap(),
        http_addr: "127.0.0.1:0".parse().unwrap(),
        data_dir: dir.to_path_buf(),
        tick_ms: 20,
        ..ServerConfig::default()
    };
    server::start(cfg).await.unwrap()
}

async fn create(s: &RunningServer, task: &TaskSpec) {
    let resp = reqwest::Client::new()
        .post(format!("http://{}/tasks", s.http_addr))
        .json(task)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201, "{}", resp.text().await.unwrap());
}

async fn run_session(task: TaskSpec, k: usize, peers: bool) -> Vec<NodeReport> {
    let dir = tempfile::tempdir().unwrap();
    let s = start_server(dir.path()).await;
    create(&s, &task).await;
    let mut handles = Vec::new();
    for i in 0..k {
        let mut cfg = DriverConfig::new(s.wire_addr.to_string());
        if peers {
            cfg.peer_bind = Some("127.0.0.1:0".parse().unwrap());
        }
        let mut setup = NodeSetup::new(task.task_id.clone(), blobs(60 + 20 * i, i as u64));
        setup.randomness = Randomness::Seeded(i as u64);
        handles.push(tokio::spawn(run_node(cfg, setup)));
    }
    let mut reports = Vec::new();
    for h in handles {
        let report = tokio::time::timeout(Duration::from_secs(60), h)
            .await
            .expect("session finishes")
            .unwrap()
            .unwrap();
        reports.push(report);
    }
    s.shutdown().await.unwrap();
    reports
}

fn assert_consensus(reports: &[NodeReport], rounds: u64) {
    let first = reports[0].params.clone().unwrap();
    for r in reports {
        assert_eq!(r.finish, Some(Finish::Completed { rounds }), "{:?}", r.exchange_failures);
        assert_eq!(r.metrics.len() as u64, rounds);
        assert_eq!(r.params.as_ref().unwrap().max_abs_diff(&first), 0.0);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn federated_session_over_tcp_completes_with_shared_model() {
    let reports = run_session(spec("fed", Scheme::Federated, false, 2), 2, false).await;
    assert_consensus(&reports, 3);
    let mut ids: Vec<u64> = reports.iter().map(|r| r.client_id.unwrap()).collect();
    ids.sort();
    assert_eq!(ids, vec![1, 2]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn secure_decentralized_session_over_tcp_completes_with_shared_model() {
    let reports = run_session(spec("mesh", Scheme::Decentralized, true, 3), 3, true).await;
    assert_consensus(&reports, 3);
    for r in &reports {
        assert_eq!(r.rounds_completed, 3);
        assert!(r.exchange_failures.is_empty());
    }
}

#[tokio::test]
async fn unreachable_server_gives_up_after_bounded_attempts() {
    // Bind then drop to get a port with nothing listening.
    let addr = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut cfg = DriverConfig::new(addr.to_string());
    cfg.connect_attempts = 3;
    cfg.retry_backoff = Duration::from_millis(10);
    let started = Instant::now();
    let err = run_node(cfg, NodeSetup::new("t", blobs(10, 0))).await.unwrap_err();
    match err {
        NodeError::Unreachable { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("unexpected error {other}"),
    }
    assert!(started.elapsed() < Duration::from_secs(5));
}
