//! Command-line surface of the `sparsemp` binary.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::bench;
use crate::comm::script::run_script;
use crate::comm::{connect_tcp, CommStats, LoopbackCluster, LoopbackOptions, Phase, TcpOptions};
use crate::config::{ClusterConfig, RunConfig};
use crate::data::{parse_xc, synth_clustered, write_xc, Dataset, SynthConfig};
use crate::engine::{drive, load_manifest, run_loopback, NodeOutcome, NodeTrainer, RunOptions};
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "sparsemp", version, about = "Model-parallel sparse training with LSH-selected neurons")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints, metrics and a summary under the
    /// configured output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// This process's node id (tcp transport only).
        #[arg(long)]
        node_id: Option<usize>,
        /// Continue from the checkpoint in the output directory if present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the configured test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Dataset to evaluate instead of `data.test`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare sparse and dense-baseline communication on a loopback cluster.
    BenchComm {
        #[arg(long)]
        config: PathBuf,
        /// Link speeds for the transfer-time projection.
        #[arg(long, value_delimiter = ',', default_value = "1,100")]
        bandwidth_gbps: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        batches: usize,
    },
    /// Report hash-table occupancy of a checkpoint.
    InspectTables {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic clustered dataset.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        features: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        out: PathBuf,
        /// Held-out points per class, written to `--test-out`.
        #[arg(long, default_value_t = 0)]
        test_per_class: usize,
        #[arg(long)]
        test_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Replay a seeded collective script over tcp and dump the results.
    #[command(hide = true)]
    TransportScript {
        #[arg(long)]
        rank: usize,
        #[arg(long, value_delimiter = ',')]
        peers: Vec<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        calls: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, node_id, resume } => cmd_train(&config, node_id, resume),
        Command::Eval { checkpoint, config, data, out } => cmd_eval(&checkpoint, &config, data.as_deref(), out.as_deref()),
        Command::BenchComm { config, bandwidth_gbps, batches } => cmd_bench_comm(&config, &bandwidth_gbps, batches),
        Command::InspectTables { checkpoint, config } => cmd_inspect_tables(&checkpoint, &config),
        Command::Synth {
            classes,
            features,
            per_class,
            out,
            test_per_class,
            test_out,
            noise,
            seed,
        } => {
            if test_per_class > 0 && test_out.is_none() {
                return Err(Error::config("--test-out is required with --test-per-class"));
            }
            let mut sc = SynthConfig::new(classes, features, per_class);
            sc.test_per_class = test_per_class;
            sc.noise = noise;
            sc.seed = seed;
            let (train, test) = synth_clustered(&sc)?;
            write_xc(&train, &out)?;
            if let Some(p) = test_out {
                write_xc(&test, &p)?;
            }
            print_json(&json!({"train": out, "train_points": train.len(), "test_points": test.len()}))
        }
        Command::TransportScript { rank, peers, seed, calls, out } => {
            let mut ep = connect_tcp(rank, &peers, TcpOptions::default())?;
            let outcome = run_script(&mut ep, seed, calls)?;
            std::fs::write(&out, serde_json::to_vec(&outcome)?)?;
            Ok(())
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let train = parse_xc(&cfg.data.train)?;
    let test = cfg.data.test.as_deref().map(parse_xc).transpose()?;
    Ok((train, test))
}

/// Final run report; `digest` covers everything except timings.
#[derive(Debug, Serialize)]
struct Summary {
    epochs: usize,
    epoch_losses: Vec<f64>,
    final_loss: Option<f64>,
    precision_at_1: Option<f64>,
    precision_at_5: Option<f64>,
    bytes_by_phase: BTreeMap<Phase, u64>,
    total_payload_bytes: u64,
    nodes: usize,
    resumed_from_epoch: Option<usize>,
    digest: String,
    wall_secs: f64,
}

fn summarize(outcome: &NodeOutcome, nodes: usize, wall: Duration) -> Summary {
    let stats: &CommStats = &outcome.stats;
    let bytes_by_phase: BTreeMap<Phase, u64> = stats.phases.iter().map(|(p, s)| (*p, s.payload_bytes)).collect();
    let losses: Vec<f64> = outcome.epochs.iter().map(|e| e.mean_loss).collect();
    let eval = outcome.final_eval();
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for l in &losses {
        l.to_bits().hash(&mut h);
    }
    if let Some(e) = eval {
        e.precision_at_1.to_bits().hash(&mut h);
        e.precision_at_5.to_bits().hash(&mut h);
    }
    bytes_by_phase.iter().for_each(|(p, b)| (*p as u8, *b).hash(&mut h));
    Summary {
        epochs: outcome.epochs.len(),
        final_loss: losses.last().copied(),
        epoch_losses: losses,
        precision_at_1: eval.map(|e| e.precision_at_1),
        precision_at_5: eval.map(|e| e.precision_at_5),
        total_payload_bytes: bytes_by_phase.values().sum(),
        bytes_by_phase,
        nodes,
        resumed_from_epoch: outcome.resumed_from_epoch,
        digest: format!("{:016x}", h.finish()),
        wall_secs: wall.as_secs_f64(),
    }
}

fn cmd_train(config: &Path, node_id: Option<usize>, resume: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (train, test) = load_data(&cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let opts = RunOptions {
        checkpoint_dir: Some(cfg.checkpoint_dir()),
        metrics_path: Some(cfg.metrics_path()),
        resume,
        eval_every_epoch: cfg.eval_every_epoch,
    };
    let start = Instant::now();
    let nodes = cfg.cluster.nodes();
    let outcome = match &cfg.cluster {
        ClusterConfig::Loopback { nodes } => {
            if node_id.is_some_and(|i| i != 0) {
                return Err(Error::config("--node-id: loopback runs every node in this process"));
            }
            run_loopback(*nodes, &cfg.network, &cfg.training, &train, test.as_ref(), &opts, LoopbackOptions::default())?
                .swap_remove(0)
        }
        ClusterConfig::Tcp { peers, timeout_secs } => {
            let rank = node_id.ok_or_else(|| Error::config("--node-id is required with the tcp transport"))?;
            if rank >= peers.len() {
                return Err(Error::config(format!("--node-id {rank} outside cluster.peers")));
            }
            let timeout = Duration::from_secs_f64(*timeout_secs);
            let tcp = TcpOptions {
                timeout,
                connect_timeout: timeout,
            };
            let mut ep = connect_tcp(rank, peers, tcp)?;
            drive(&mut ep, &cfg.network, &cfg.training, &train, test.as_ref(), &opts)?
        }
    };
    let summary = summarize(&outcome, nodes, start.elapsed());
    if outcome.rank == 0 {
        std::fs::write(cfg.summary_path(), serde_json::to_vec_pretty(&summary)?)?;
    }
    print_json(&summary)
}

fn cmd_eval(checkpoint: &Path, config: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let path = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.test.clone())
        .ok_or_else(|| Error::config("data.test: no test set configured and no --data given"))?;
    let test = parse_xc(&path)?;
    let manifest = load_manifest(checkpoint)?;
    let nodes = manifest.nodes;
    let reports = LoopbackCluster::run(nodes, LoopbackOptions::default(), |mut ep| -> Result<_> {
        let mut t = NodeTrainer::<f32>::load_checkpoint(checkpoint, cfg.network.clone(), cfg.training.clone(), ep.rank())?;
        t.evaluate(&mut ep, &test)
    });
    let report = reports.into_iter().next().expect("at least one node")?;
    let doc = json!({
        "checkpoint": checkpoint,
        "dataset": path,
        "epochs_trained": manifest.epochs_done,
        "samples": report.samples,
        "precision_at_1": report.precision_at_1,
        "precision_at_5": report.precision_at_5,
    });
    if let Some(o) = out {
        std::fs::write(o, serde_json::to_vec_pretty(&doc)?)?;
    }
    print_json(&doc)
}

fn cmd_bench_comm(config: &Path, bandwidths: &[f64], batches: usize) -> Result<()> {
    if bandwidths.iter().any(|b| !(*b > 0.0)) {
        return Err(Error::config("--bandwidth-gbps values must be positive"));
    }
    if batches == 0 {
        return Err(Error::config("--batches must be at least 1"));
    }
    let cfg = RunConfig::load(config)?;
    let train = parse_xc(&cfg.data.train)?;
    let report = bench::compare(&cfg.network, &cfg.training, &train, cfg.cluster.nodes(), batches, bandwidths)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("bench_comm.json"), serde_json::to_vec_pretty(&report)?)?;
    print_json(&report)?;
    eprintln!(
        "forward gather: sparse {:.0} B/batch, dense {:.0} B/batch, ratio {:.4} (~{:.1}% compression)",
        report.sparse.forward_gather, report.dense.forward_gather, report.forward_ratio, report.forward_compression_pct
    );
    Ok(())
}

fn cmd_inspect_tables(checkpoint: &Path, config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let manifest = load_manifest(checkpoint)?;
    let mut layers: Vec<Vec<serde_json::Value>> = vec![Vec::new(); manifest.layers.len()];
    for node in 0..manifest.nodes {
        let t = NodeTrainer::<f32>::load_checkpoint(checkpoint, cfg.network.clone(), cfg.training.clone(), node)?;
        for (k, shards) in layers.iter_mut().enumerate() {
            if let Some(idx) = t.index(k) {
                shards.push(serde_json::to_value(idx.stats())?);
            }
        }
    }
    let layers: Vec<_> = layers
        .into_iter()
        .enumerate()
        .map(|(k, shards)| json!({"layer": k, "shards": shards}))
        .collect();
    print_json(&json!({"checkpoint": checkpoint, "nodes": manifest.nodes, "layers": layers}))
}
