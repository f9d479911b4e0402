use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use colearn_core::data::Dataset;
use colearn_core::task::TaskSpec;
use colearn_core::ParamVector;
use colearn_coordinator::config::ServerConfig;
use colearn_node::driver::{run_node, DriverConfig};
use colearn_node::{evaluate, run_solo, write_metrics_csv, DataFormat, DataSource, Finish, NodeSetup, Shard};
use colearn_sim::{export_report, run_scenario, Scenario};
use tracing::info;
use tracing_subscriber::{fmt, EnvFilter};

#[derive(Parser)]
#[command(version, about = "Collaborative training: coordinator, nodes, solo baselines and simulations")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Run the coordinator until interrupted.
    Serve {
        /// TOML config; defaults apply when omitted. COLEARN_* variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Validate a task spec and register it with a running coordinator.
    CreateTask {
        /// Task spec JSON file.
        #[arg(long)]
        spec: PathBuf,
        /// Coordinator HTTP address.
        #[arg(long, default_value = "http://127.0.0.1:7401")]
        server: String,
    },
    /// Join a task and train until the session ends.
    Join {
        /// Coordinator wire address (host:port).
        #[arg(long, default_value = "127.0.0.1:7400")]
        server: String,
        #[arg(long)]
        task: String,
        #[command(flatten)]
        data: DataArgs,
        /// Where to accept peer connections (decentralized tasks).
        #[arg(long)]
        listen: Option<SocketAddr>,
        /// Address announced to peers, if not the bound one.
        #[arg(long)]
        advertise: Option<String>,
        /// Attempts to reach the coordinator before giving up.
        #[arg(long, default_value_t = 5)]
        connect_attempts: u32,
        /// Wait before the first retry; doubles on each attempt.
        #[arg(long, default_value_t = 200)]
        retry_backoff_ms: u64,
        /// Write per-epoch metrics here.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Save the final model here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a task's model on local data alone, as a baseline.
    Solo {
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario in the deterministic simulator and export its report.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Directory for report.json and metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved model on a dataset.
    Evaluate {
        /// Model checkpoint written by `join`, `solo` or the coordinator.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Idx,
}

#[derive(Args)]
struct DataArgs {
    /// CSV file, or the IDX image file.
    #[arg(long)]
    data: PathBuf,
    /// Defaults to csv for `.csv` files and idx otherwise.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// CSV label column: a header name or a zero-based index.
    #[arg(long, default_value = "label")]
    label_column: String,
    /// Keep one IID shard of the rows, as INDEX/COUNT.
    #[arg(long, value_parser = parse_shard)]
    shard: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0)]
    shard_seed: u64,
    /// Keep only the first N rows.
    #[arg(long)]
    limit: Option<usize>,
}

fn parse_shard(s: &str) -> Result<(usize, usize), String> {
    let (i, n) = s.split_once('/').ok_or("expected INDEX/COUNT")?;
    let i = i.parse().map_err(|e| format!("shard index: {e}"))?;
    let n = n.parse().map_err(|e| format!("shard count: {e}"))?;
    Ok((i, n))
}

impl DataArgs {
    fn load(&self) -> anyhow::Result<Dataset> {
        let is_csv = self.data.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let format = match self.format.unwrap_or(if is_csv { Format::Csv } else { Format::Idx }) {
            Format::Csv => DataFormat::Csv {
                path: self.data.clone(),
                label_column: self.label_column.clone(),
            },
            Format::Idx => DataFormat::Idx {
                images: self.data.clone(),
                labels: self.labels.clone().context("IDX data needs --labels")?,
            },
        };
        let source = DataSource {
            format,
            shard: self.shard.map(|(index, count)| Shard {
                index,
                count,
                seed: self.shard_seed,
            }),
            limit: self.limit,
        };
        let data = source
            .load()
            .with_context(|| format!("loading {}", self.data.display()))?;
        info!(rows = data.len(), features = data.n_features(), classes = data.num_classes(), "data loaded");
        Ok(data)
    }
}

fn read_spec(path: &Path) -> anyhow::Result<TaskSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: TaskSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}

fn save_model(params: &ParamVector, path: &Path) -> anyhow::Result<()> {
    params.save(path).with_context(|| format!("saving {}", path.display()))?;
    info!(path = %path.display(), "model saved");
    Ok(())
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Commands::Serve { config } => serve(config).await,
        Commands::CreateTask { spec, server } => create_task(&spec, &server).await,
        Commands::Join {
            server,
            task,
            data,
            listen,
            advertise,
            connect_attempts,
            retry_backoff_ms,
            metrics,
            out,
        } => {
            let cfg = DriverConfig {
                peer_bind: listen,
                advertise,
                connect_attempts,
                retry_backoff: Duration::from_millis(retry_backoff_ms),
                metrics_csv: metrics,
                ..DriverConfig::new(server)
            };
            join(cfg, NodeSetup::new(task, data.load()?), out).await
        }
        Commands::Solo {
            spec,
            data,
            metrics,
            out,
        } => solo(&read_spec(&spec)?, &data.load()?, metrics, out),
        Commands::Simulate { scenario, out } => simulate(&scenario, &out),
        Commands::Evaluate { model, data } => {
            let params = ParamVector::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let (loss, accuracy) = evaluate(&params, &data.load()?)?;
            println!("loss {loss:.6} accuracy {accuracy:.4}");
            Ok(())
        }
    }
}

async fn serve(config: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = ServerConfig::load(config.as_deref())?;
    let server = colearn_coordinator::server::start(cfg).await?;
    println!("nodes: {}  http: http://{}", server.wire_addr, server.http_addr);
    server
        .run_until(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn create_task(spec_path: &Path, server: &str) -> anyhow::Result<()> {
    let spec = read_spec(spec_path)?;
    let url = format!("{}/tasks", server.trim_end_matches('/'));
    let response = reqwest::Client::new()
        .post(&url)
        .json(&spec)
        .send()
        .await
        .with_context(|| format!("posting to {url}"))?;
    let status = response.status();
    let body = response.text().await.unwrap_or_default();
    if !status.is_success() {
        bail!("coordinator refused the task ({status}): {body}");
    }
    println!("{body}");
    Ok(())
}

async fn join(cfg: DriverConfig, setup: NodeSetup, out: Option<PathBuf>) -> anyhow::Result<()> {
    let report = run_node(cfg, setup).await?;
    if let (Some(path), Some(params)) = (&out, &report.params) {
        save_model(params, path)?;
    }
    match report.finish {
        Some(Finish::Completed { rounds }) => {
            println!(
                "session finished after {rounds} rounds ({} completed, {} failed locally)",
                report.rounds_completed, report.rounds_failed
            );
            Ok(())
        }
        Some(Finish::Failed(why)) => bail!("node gave up: {why}"),
        None => bail!("session ended without a result"),
    }
}

fn solo(spec: &TaskSpec, data: &Dataset, metrics: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let outcome = run_solo(spec, data)?;
    if let Some(path) = metrics {
        write_metrics_csv(&path, &outcome.metrics).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = out {
        save_model(&outcome.params, &path)?;
    }
    if let Some(last) = outcome.metrics.last() {
        println!(
            "{} epochs, final training loss {:.6} accuracy {:.4}",
            last.epoch, last.loss, last.accuracy
        );
    }
    Ok(())
}

fn simulate(scenario: &Path, out: &Path) -> anyhow::Result<()> {
    let s = Scenario::load(scenario)?;
    let report = run_scenario(&s)?;
    export_report(&report, s.task.train.epochs_per_round, out)?;
    let accuracy = report
        .final_accuracy
        .map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "{}: {}/{} rounds, final held-out accuracy {accuracy}, report in {}",
        report.scenario,
        report.rounds_completed,
        report.total_rounds,
        out.display()
    );
    if !report.session_finished {
        bail!("the simulated session did not finish");
    }
    Ok(())
}
