//! `lodestar` subcommands. Exit codes: 0 success, 1 validation error,
//! 2 runtime abort.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tokio_util::sync::CancellationToken;

use crate::analysis::{emit_report, read_counters_csv, read_records_csv, write_counters_csv, RecordsWriter, RunReport};
use crate::controller::{
    self, agent, connect_agent, load_scenario, run_scenario, spawn_local_fleet, RunError, RunOptions, RunResult,
};
use crate::scripting::Recorder;
use crate::testbed::{Testbed, TestbedConfig};

pub const SEED_ENV: &str = "LODESTAR_SEED";

#[derive(Debug, Parser)]
#[command(name = "lodestar", version, about = "Scripted virtual-user load testing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record a script through an HTTP proxy until interrupted.
    Record {
        #[arg(long)]
        port: u16,
        #[arg(long)]
        out: PathBuf,
        /// Forward to this base URL instead of the request's Host.
        #[arg(long)]
        upstream: Option<String>,
        #[arg(long, default_value = "recorded")]
        name: String,
    },
    /// Run a scenario and write the run directory.
    Run {
        scenario: PathBuf,
        /// Remote agents, comma separated host:port. Local agents otherwise.
        #[arg(long, value_delimiter = ',')]
        agents: Vec<String>,
        #[arg(long, default_value = "lodestar-run")]
        out: PathBuf,
    },
    /// Regenerate reports from a run directory's raw records and counters.
    Report {
        rundir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve as a load generator agent.
    Agent {
        #[arg(long)]
        listen: u16,
        #[arg(long)]
        capacity: u64,
        #[arg(long, default_value = "default")]
        tag: String,
    },
    /// Serve the mock e-commerce testbed.
    Testbed {
        #[arg(long)]
        port: u16,
        #[arg(long = "latency-ms", default_value_t = 50)]
        latency_ms: u64,
        #[arg(long, default_value_t = 10)]
        slots: usize,
        #[arg(long = "error-rate", default_value_t = 0.0)]
        error_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// `meta.json` of a run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    /// `running`, `complete` or `partial`.
    pub status: String,
    #[serde(flatten)]
    pub result: RunResult,
}

fn write_meta(dir: &Path, meta: &RunMeta) -> Result<(), CliError> {
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn read_meta(dir: &Path) -> Result<RunMeta, CliError> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn interrupt() -> CancellationToken {
    let token = CancellationToken::new();
    let t = token.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            t.cancel();
        }
    });
    token
}

pub async fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Record { port, out, upstream, name } => record(port, &out, upstream, &name).await,
        Command::Run { scenario, agents, out } => run(&scenario, &agents, &out, std::env::var(SEED_ENV).ok()).await,
        Command::Report { rundir, out } => report(&rundir, &out),
        Command::Agent { listen, capacity, tag } => {
            let listener = tokio::net::TcpListener::bind(("0.0.0.0", listen))
                .await
                .map_err(|e| runtime(format!("cannot listen on port {listen}: {e}")))?;
            eprintln!("agent {tag} listening on {}", listener.local_addr().map_err(runtime)?);
            agent::serve(listener, agent::AgentConfig::new(tag, capacity), interrupt())
                .await
                .map_err(runtime)
        }
        Command::Testbed { port, latency_ms, slots, error_rate, seed } => {
            let config = TestbedConfig { port, latency_ms, service_slots: slots, error_rate, seed, ..Default::default() };
            config.validate().map_err(|e| CliError::Validation(e.to_string()))?;
            let testbed = Testbed::serve_on(([0, 0, 0, 0], port).into(), config).await.map_err(runtime)?;
            eprintln!("testbed listening on {}", testbed.addr());
            interrupt().cancelled().await;
            let log = testbed.shutdown().await;
            eprintln!("testbed served {} requests", log.len());
            Ok(())
        }
    }
}

async fn record(port: u16, out: &Path, upstream: Option<String>, name: &str) -> Result<(), CliError> {
    let upstream = upstream
        .map(|u| u.parse().map_err(|e| CliError::Validation(format!("invalid --upstream {u}: {e}"))))
        .transpose()?;
    let recorder = Recorder::bind(port, upstream).await.map_err(runtime)?;
    eprintln!("recording proxy on {}; interrupt to finish", recorder.local_addr());
    interrupt().cancelled().await;
    let script = recorder.finish(name).await.map_err(runtime)?;
    std::fs::write(out, script.to_document()).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    eprintln!("wrote {} steps to {}", script.steps.len(), out.display());
    Ok(())
}

async fn run(scenario_path: &Path, agents: &[String], out: &Path, seed_env: Option<String>) -> Result<(), CliError> {
    let mut scenario = load_scenario(scenario_path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", scenario_path.display())))?;
    if let Some(seed) = seed_env {
        scenario.seed = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("{SEED_ENV}={seed} is not an unsigned integer")))?;
    }
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    std::fs::copy(scenario_path, out.join("scenario.json")).map_err(runtime)?;

    let options = RunOptions { stop: interrupt(), ..Default::default() };
    let links = if agents.is_empty() {
        spawn_local_fleet(&scenario, &options).await.map_err(runtime)?
    } else {
        let mut links = Vec::new();
        for address in agents {
            links.push(connect_agent(address).await.map_err(runtime)?);
        }
        links
    };

    let started = RunResult {
        run_id: controller::run_id(&scenario),
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        started_ms: crate::runtime::clock::unix_ms(),
        ended_ms: 0,
        partial: false,
        pass: 0,
        fail: 0,
        agents: Vec::new(),
        releases: Vec::new(),
        levels: Vec::new(),
        omitted_counters: Vec::new(),
        records: Vec::new(),
        counters: Vec::new(),
    };
    write_meta(out, &RunMeta { status: "running".into(), result: started })?;

    let mut writer = RecordsWriter::create(&out.join("records.csv")).map_err(runtime)?;
    let (tx, mut rx) = mpsc::unbounded_channel::<Vec<crate::runtime::TransactionRecord>>();
    let persist = tokio::spawn(async move {
        while let Some(batch) = rx.recv().await {
            writer.append(&batch)?;
        }
        Ok::<_, crate::analysis::ReportError>(())
    });
    let options = RunOptions { sink: Some(tx), ..options };
    let outcome = run_scenario(&scenario, links, options).await;
    persist.await.map_err(runtime)?.map_err(runtime)?;

    let (result, failure) = match outcome {
        Ok(result) => (result, None),
        Err(RunError::AgentLost { address, reason, result }) => {
            let msg = format!("agent {address} lost ({reason}); partial results written to {}", out.display());
            (*result, Some(CliError::Runtime(msg)))
        }
        Err(e) if e.is_validation() => return Err(CliError::Validation(e.to_string())),
        Err(e) => return Err(runtime(e)),
    };
    write_counters_csv(&out.join("counters.csv"), &result.counters).map_err(runtime)?;
    let status = if result.partial { "partial" } else { "complete" };
    write_meta(out, &RunMeta { status: status.into(), result: result.clone() })?;
    emit_report(&result.report(), out).map_err(runtime)?;
    println!(
        "{}: {} records ({} pass, {} fail){}; report at {}",
        result.run_id,
        result.records.len(),
        result.pass,
        result.fail,
        if result.partial { ", PARTIAL" } else { "" },
        out.join("report.html").display()
    );
    match failure {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

/// Rebuilds every report file from a run directory's raw data.
pub fn report(rundir: &Path, out: &Path) -> Result<(), CliError> {
    let meta = read_meta(rundir)?;
    let records = read_records_csv(&rundir.join("records.csv")).map_err(|e| CliError::Validation(e.to_string()))?;
    let counters_path = rundir.join("counters.csv");
    let counters = if counters_path.exists() {
        read_counters_csv(&counters_path).map_err(|e| CliError::Validation(e.to_string()))?
    } else {
        Vec::new()
    };
    let report = RunReport::build(meta.result.report_meta(), records, counters);
    emit_report(&report, out).map_err(runtime)?;
    if out != rundir {
        let copy = RunMeta { status: meta.status, result: meta.result };
        write_meta(out, &copy)?;
    }
    Ok(())
}

/// Parses arguments, runs the subcommand and maps the outcome to an exit
/// code. `--help` and `--version` exit 0; argument errors exit 1.
pub async fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match execute(cli).await {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {}", err.message());
            err.exit_code()
        }
    }
}
