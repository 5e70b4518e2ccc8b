use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qnetsim::bench::{self, BenchOptions, RingMode, Scenario};
use qnetsim::cluster::launch;
use qnetsim::netconf::NodeDirectory;
use qnetsim::peerlink::{query, PeerRequest, PeerResponse};
use qnetsim::vnode::NodeConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "qnetsim", version, about = "Distributed quantum network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one node (backend and CQC server) from a network config file.
    Node(NodeArgs),
    /// Print the state summary of a running node.
    Status {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        name: String,
        /// Also print registers and qubit tables.
        #[arg(long)]
        verbose: bool,
    },
    /// Run a timing scenario on an in-process network.
    Bench {
        #[command(subcommand)]
        scenario: BenchCmd,
        #[command(flatten)]
        common: BenchCommon,
    },
}

#[derive(Args)]
struct NodeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    name: String,
    #[arg(long, default_value_t = qnetsim::engine::DEFAULT_MAX_REGISTER_QUBITS)]
    max_register_qubits: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "info")]
    log_level: String,
    /// Seconds to wait for every other node to come up.
    #[arg(long, default_value_t = 60)]
    wait_secs: u64,
}

#[derive(Args)]
struct BenchCommon {
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Write rows here instead of standard output.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    trials: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fly,
    First,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Teleport a qubit once around a ring of nodes.
    Ring {
        #[arg(long)]
        nodes: usize,
        #[arg(long, value_enum, default_value = "fly")]
        mode: ModeArg,
    },
    /// Teleport a qubit back and forth between two nodes.
    Pingpong {
        #[arg(long)]
        rounds: usize,
    },
    /// Create and measure independent qubits.
    Create {
        #[arg(long)]
        qubits: usize,
    },
    /// Prepare and measure a GHZ state.
    Ghz {
        #[arg(long)]
        qubits: usize,
    },
    /// BB84 and teleportation checks.
    Protocols,
}

fn init_logging(level: &str) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

async fn run_node(args: NodeArgs) -> Result<(), String> {
    init_logging(&args.log_level);
    let directory = NodeDirectory::load(&args.config).map_err(|e| e.to_string())?;
    let config = NodeConfig {
        max_register_qubits: args.max_register_qubits,
        seed: args.seed,
        dial_window: Duration::from_secs(args.wait_secs),
        ..NodeConfig::default()
    };
    let (node, server) = launch(directory, &args.name, config).await.map_err(|e| e.to_string())?;
    tracing::info!(node = %node.name(), "serving; press Ctrl-C to stop");
    tokio::signal::ctrl_c().await.map_err(|e| e.to_string())?;
    server.shutdown();
    node.shutdown();
    Ok(())
}

async fn status(config: PathBuf, name: String, verbose: bool) -> Result<(), String> {
    let directory = NodeDirectory::load(&config).map_err(|e| e.to_string())?;
    let addr = directory.get(&name).and_then(|e| e.backend_addr()).map_err(|e| e.to_string())?;
    match query(addr, PeerRequest::NodeStateDump, Duration::from_secs(5)).await.map_err(|e| e.to_string())? {
        PeerResponse::Dump(text) => {
            let summary = text.lines().take_while(|l| !l.starts_with("register "));
            for line in if verbose { text.lines().collect::<Vec<_>>() } else { summary.collect() } {
                println!("{line}");
            }
            Ok(())
        }
        other => Err(format!("unexpected reply {other:?}")),
    }
}

async fn run_bench(scenario: BenchCmd, common: BenchCommon) -> Result<(), String> {
    let scenario = match scenario {
        BenchCmd::Ring { nodes, mode } => Scenario::Ring {
            nodes,
            mode: match mode {
                ModeArg::Fly => RingMode::Fly,
                ModeArg::First => RingMode::First,
            },
        },
        BenchCmd::Pingpong { rounds } => Scenario::PingPong { rounds },
        BenchCmd::Create { qubits } => Scenario::Create { qubits },
        BenchCmd::Ghz { qubits } => Scenario::Ghz { qubits },
        BenchCmd::Protocols => Scenario::Protocols,
    };
    eprintln!(
        "note: every node runs its backend and CQC server in this process; clients and nodes talk over loopback TCP"
    );
    let opts = BenchOptions::new(common.seed, common.trials);
    let result = bench::run(scenario, &opts).await.map_err(|e| e.to_string())?;
    match &common.csv {
        Some(path) => {
            let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
            bench::write_csv(file, &result.records).map_err(|e| e.to_string())?;
        }
        None => bench::write_csv(std::io::stdout(), &result.records).map_err(|e| e.to_string())?,
    }
    eprintln!("median wall time {:.6} s over {} trials", result.median_wall_time(), result.records.len());
    for (outcome, freq) in &result.outcome_stats {
        eprintln!("{outcome}: {freq:.4}");
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Node(args) => run_node(args).await,
        Cmd::Status { config, name, verbose } => status(config, name, verbose).await,
        Cmd::Bench { scenario, common } => run_bench(scenario, common).await,
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
