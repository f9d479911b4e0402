use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use colearn_sim::blobs;
use serde_json::{json, Value};

fn colearn() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_colearn"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../sim/scenarios")
        .join(format!("{name}.json"))
}

/// Gaussian blobs as a headered CSV with a `label` column.
fn write_blobs_csv(path: &Path, rows: usize, seed: u64) {
    let data = blobs(rows, 8, 3, 1.2, seed);
    let mut f = std::fs::File::create(path).unwrap();
    let header: Vec<String> = (0..8).map(|i| format!("x{i}")).chain(["label".into()]).collect();
    writeln!(f, "{}", header.join(",")).unwrap();
    for (row, label) in data.features().chunks(8).zip(data.labels()) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},{label}", cells.join(",")).unwrap();
    }
}

fn task_spec(task_id: &str, rounds: u64) -> Value {
    json!({
        "taskId": task_id,
        "model": {"inputDim": 8, "hiddenDim": 16, "outputDim": 3, "seed": 4},
        "train": {"batchSize": 16, "epochsPerRound": 2, "learningRate": 0.1, "shuffleSeed": 9},
        "scheme": "federated",
        "minParticipants": 2,
        "readyThreshold": 2,
        "totalRounds": rounds,
        "roundDeadlineSecs": 30
    })
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn simulate_writes_the_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("smoke");
    let o = run(colearn()
        .args(["simulate", "--scenario"])
        .arg(scenario("smoke"))
        .arg("--out")
        .arg(&out));
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("10/10 rounds"), "{}", text(&o.stdout));
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["roundsCompleted"], 10);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    // Header, 10 rounds x 2 clients x 2 epochs, and 10 global rows.
    assert_eq!(csv.lines().count(), 1 + 40 + 10);
}

#[test]
fn simulate_rejects_a_missing_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(colearn()
        .args(["simulate", "--scenario"])
        .arg(dir.path().join("nope.json"))
        .arg("--out")
        .arg(dir.path()));
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("nope.json"), "{}", text(&o.stderr));
}

#[test]
fn join_gives_up_on_an_unreachable_server() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("local.csv");
    write_blobs_csv(&csv, 50, 1);
    let started = Instant::now();
    let o = run(colearn()
        .args(["join", "--task", "t", "--connect-attempts", "3", "--retry-backoff-ms", "20"])
        .arg("--server")
        .arg(format!("127.0.0.1:{}", free_port()))
        .arg("--data")
        .arg(&csv));
    assert!(!o.status.success());
    let err = text(&o.stderr);
    assert!(err.contains("unreachable after 3 attempts"), "{err}");
    assert!(started.elapsed() < Duration::from_secs(20));
}

#[test]
fn create_task_names_the_violated_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.json");
    let mut spec = task_spec("bad", 3);
    spec["model"]["outputDim"] = json!(1);
    std::fs::write(&path, spec.to_string()).unwrap();
    // Validation happens before any request, so no server is needed.
    let o = run(colearn().args(["create-task", "--spec"]).arg(&path).args([
        "--server",
        &format!("http://127.0.0.1:{}", free_port()),
    ]));
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("outputDim must be at least 2"), "{}", text(&o.stderr));

    spec = task_spec("bad", 0);
    std::fs::write(&path, spec.to_string()).unwrap();
    let o = run(colearn().args(["create-task", "--spec"]).arg(&path));
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("totalRounds must be positive"), "{}", text(&o.stderr));
}

#[test]
fn solo_then_evaluate_round_trips_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("train.csv");
    write_blobs_csv(&csv, 300, 2);
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, task_spec("solo", 5).to_string()).unwrap();
    let model = dir.path().join("model.bin");
    let metrics = dir.path().join("metrics.csv");
    let o = run(colearn()
        .args(["solo", "--spec"])
        .arg(&spec)
        .arg("--data")
        .arg(&csv)
        .arg("--out")
        .arg(&model)
        .arg("--metrics")
        .arg(&metrics));
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).starts_with("10 epochs"), "{}", text(&o.stdout));
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 11);

    let o = run(colearn().args(["evaluate", "--model"]).arg(&model).arg("--data").arg(&csv));
    assert!(o.status.success(), "{}", text(&o.stderr));
    let line = text(&o.stdout);
    let accuracy: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
    assert!(accuracy > 0.8, "{line}");
}

#[test]
fn serve_create_and_two_joins_complete_a_session() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("server.toml");
    std::fs::write(
        &config,
        format!(
            "wire_addr = \"127.0.0.1:0\"\nhttp_addr = \"127.0.0.1:0\"\ndata_dir = {:?}\n",
            dir.path().join("store")
        ),
    )
    .unwrap();
    let mut server = KillOnDrop(
        colearn()
            .args(["serve", "--config"])
            .arg(&config)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let mut banner = String::new();
    BufReader::new(server.0.stdout.take().unwrap())
        .read_line(&mut banner)
        .unwrap();
    // "nodes: <wire>  http: <url>"
    let fields: Vec<&str> = banner.split_whitespace().collect();
    let (wire, http) = (fields[1].to_string(), fields[3].to_string());

    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, task_spec("cli-e2e", 3).to_string()).unwrap();
    let o = run(colearn().args(["create-task", "--spec"]).arg(&spec).args(["--server", &http]));
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("cli-e2e"));

    let csv = dir.path().join("pool.csv");
    write_blobs_csv(&csv, 400, 3);
    let nodes: Vec<Child> = (0..2)
        .map(|i| {
            colearn()
                .args(["join", "--task", "cli-e2e", "--server", &wire])
                .arg("--data")
                .arg(&csv)
                .args(["--shard", &format!("{i}/2")])
                .arg("--out")
                .arg(dir.path().join(format!("node{i}.bin")))
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();
    for node in nodes {
        let o = node.wait_with_output().unwrap();
        assert!(o.status.success(), "{}", text(&o.stderr));
        assert!(text(&o.stdout).contains("finished after 3 rounds"), "{}", text(&o.stdout));
    }
    // Both nodes end on the coordinator's global model.
    let a = std::fs::read(dir.path().join("node0.bin")).unwrap();
    let b = std::fs::read(dir.path().join("node1.bin")).unwrap();
    assert_eq!(a, b);
}
