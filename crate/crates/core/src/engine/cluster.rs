//! Driving a whole run on one node, and on an in-process loopback cluster.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::checkpoint::MANIFEST_FILE;
use super::trainer::{EpochSummary, EvalReport, NodeTrainer};
use super::{NetworkSpec, TrainingConfig};
use crate::comm::{CommStats, Endpoint, LoopbackCluster, LoopbackOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Where a run keeps its artifacts. Node 0 writes the metrics stream.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Continue from `checkpoint_dir` when it holds a checkpoint.
    pub resume: bool,
    /// Evaluate on the test set after every epoch instead of only at the end.
    pub eval_every_epoch: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeOutcome {
    pub rank: usize,
    pub epochs: Vec<EpochSummary>,
    /// Per-epoch test precision when requested, else only the final one.
    pub evals: Vec<EvalReport>,
    pub stats: CommStats,
    pub resumed_from_epoch: Option<usize>,
}

impl NodeOutcome {
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.evals.last()
    }
}

/// Trains node `ep.rank()` to completion: resume or initialize, one
/// checkpoint before the first epoch and after each one, metrics per batch.
pub fn drive(
    ep: &mut Endpoint,
    net: &NetworkSpec,
    cfg: &TrainingConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    opts: &RunOptions,
) -> Result<NodeOutcome> {
    let rank = ep.rank();
    let existing = opts
        .checkpoint_dir
        .as_ref()
        .filter(|d| opts.resume && d.join(MANIFEST_FILE).exists());
    let mut trainer = match existing {
        Some(dir) => NodeTrainer::<f32>::load_checkpoint(dir, net.clone(), cfg.clone(), rank)?,
        None => NodeTrainer::<f32>::new(net.clone(), cfg.clone(), rank, ep.size())?,
    };
    if trainer.plan().nodes != ep.size() {
        return Err(Error::checkpoint(format!(
            "checkpoint was written by {} nodes, cluster has {}",
            trainer.plan().nodes,
            ep.size()
        )));
    }
    let resumed_from_epoch = existing.map(|_| trainer.epochs_done());
    trainer.check_dataset(train)?;
    if let Some(t) = test {
        trainer.check_dataset(t)?;
    }

    let mut metrics = match (&opts.metrics_path, rank) {
        (Some(p), 0) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let f: File = if resumed_from_epoch.is_some() {
                OpenOptions::new().create(true).append(true).open(p)?
            } else {
                File::create(p)?
            };
            Some(BufWriter::new(f))
        }
        _ => None,
    };

    if let (Some(dir), None) = (&opts.checkpoint_dir, resumed_from_epoch) {
        trainer.save_checkpoint(ep, dir)?;
    }
    let mut epochs = Vec::new();
    let mut evals = Vec::new();
    while trainer.epochs_done() < cfg.epochs {
        let summary = trainer.train_epoch(ep, train, |m| {
            if let Some(w) = metrics.as_mut() {
                serde_json::to_writer(&mut *w, m)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
        if let Some(w) = metrics.as_mut() {
            w.flush()?;
        }
        epochs.push(summary);
        if let Some(dir) = &opts.checkpoint_dir {
            trainer.save_checkpoint(ep, dir)?;
        }
        let last = trainer.epochs_done() == cfg.epochs;
        if let Some(t) = test.filter(|_| opts.eval_every_epoch || last) {
            evals.push(trainer.evaluate(ep, t)?);
        }
    }
    Ok(NodeOutcome {
        rank,
        epochs,
        evals,
        stats: ep.stats(),
        resumed_from_epoch,
    })
}

/// Runs [`drive`] on `nodes` in-process nodes. The first failing node's
/// error is returned.
pub fn run_loopback(
    nodes: usize,
    net: &NetworkSpec,
    cfg: &TrainingConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    opts: &RunOptions,
    loopback: LoopbackOptions,
) -> Result<Vec<NodeOutcome>> {
    if nodes == 0 {
        return Err(Error::config("cluster needs at least one node"));
    }
    let results = LoopbackCluster::run(nodes, loopback, |mut ep| drive(&mut ep, net, cfg, train, test, opts));
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_clustered, SynthConfig};
    use crate::engine::{BatchMetrics, LayerConfig};
    use crate::layer::Activation;
    use crate::lsh::LshConfig;

    #[test]
    fn loopback_run_writes_metrics_and_checkpoints() {
        let mut sc = SynthConfig::new(8, 20, 3);
        sc.test_per_class = 1;
        sc.support = 5;
        sc.nnz = 6;
        let (train, test) = synth_clustered(&sc).unwrap();
        let net = NetworkSpec {
            input_dim: 20,
            layers: vec![
                LayerConfig::dense(6, Activation::Relu),
                LayerConfig::sparse(8, Activation::Softmax, 0.5, LshConfig::srp(0)),
            ],
            seed: 2,
        };
        let cfg = TrainingConfig::new(4, 2);
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            checkpoint_dir: Some(dir.path().join("ckpt")),
            metrics_path: Some(dir.path().join("metrics.jsonl")),
            resume: true,
            eval_every_epoch: false,
        };
        let out = run_loopback(2, &net, &cfg, &train, Some(&test), &opts, LoopbackOptions::default()).unwrap();
        assert_eq!(out[0].epochs.len(), 2);
        assert_eq!(out[0].evals, out[1].evals);
        let text = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let lines: Vec<BatchMetrics> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 12);
        assert!(dir.path().join("ckpt").join(MANIFEST_FILE).exists());

        // everything done already: resuming trains nothing more
        let again = run_loopback(2, &net, &cfg, &train, Some(&test), &opts, LoopbackOptions::default()).unwrap();
        assert_eq!(again[0].resumed_from_epoch, Some(2));
        assert!(again[0].epochs.is_empty());
    }
}
