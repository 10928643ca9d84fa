//! Sparse vs dense-baseline communication comparison.

use serde::{Deserialize, Serialize};

use crate::comm::{LoopbackCluster, LoopbackOptions, Phase};
use crate::data::Dataset;
use crate::engine::{NetworkSpec, NodeTrainer, TrainMode, TrainingConfig};
use crate::error::Result;
use crate::sparse::DataRecord;

/// Mean logical payload bytes per batch, by phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBytes {
    pub forward_gather: f64,
    pub error_sync: f64,
    pub grad_reduce: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub bandwidth_gbps: f64,
    pub sparse_secs_per_batch: f64,
    pub dense_secs_per_batch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub nodes: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub sparse: ModeBytes,
    pub dense: ModeBytes,
    /// Sparse over dense forward-gather bytes.
    pub forward_ratio: f64,
    pub total_ratio: f64,
    pub forward_compression_pct: f64,
    pub projections: Vec<Projection>,
}

/// Trains `batches` batches in each mode on a loopback cluster and returns
/// node 0's byte counters.
pub fn mode_bytes(
    net: &NetworkSpec,
    cfg: &TrainingConfig,
    mode: TrainMode,
    data: &Dataset,
    nodes: usize,
    batches: usize,
) -> Result<ModeBytes> {
    let cfg = TrainingConfig { mode, ..cfg.clone() };
    let order = data.batch_order(cfg.batch_size, None);
    let order: Vec<_> = order.into_iter().take(batches).collect();
    let n = order.len().max(1) as f64;
    let out = LoopbackCluster::run(nodes, LoopbackOptions::default(), |mut ep| -> Result<_> {
        let mut t = NodeTrainer::<f32>::new(net.clone(), cfg.clone(), ep.rank(), nodes)?;
        for ids in &order {
            let records: Vec<&DataRecord> = ids.iter().map(|&i| &data.records[i]).collect();
            t.train_batch(&mut ep, &records)?;
        }
        Ok(ep.stats())
    });
    let stats = out.into_iter().next().expect("at least one node")?;
    let per = |p: Phase| stats.payload_bytes(p) as f64 / n;
    let (f, e, g) = (per(Phase::ForwardGather), per(Phase::ErrorSync), per(Phase::GradReduce));
    Ok(ModeBytes {
        forward_gather: f,
        error_sync: e,
        grad_reduce: g,
        total: f + e + g,
    })
}

pub fn compare(
    net: &NetworkSpec,
    cfg: &TrainingConfig,
    data: &Dataset,
    nodes: usize,
    batches: usize,
    bandwidths_gbps: &[f64],
) -> Result<CommReport> {
    let sparse = mode_bytes(net, cfg, TrainMode::Sparse, data, nodes, batches)?;
    let dense = mode_bytes(net, cfg, TrainMode::DenseBaseline, data, nodes, batches)?;
    let forward_ratio = sparse.forward_gather / dense.forward_gather;
    let secs = |bytes: f64, gbps: f64| bytes * 8.0 / (gbps * 1e9);
    Ok(CommReport {
        nodes,
        batches: batches.min(data.len().div_ceil(cfg.batch_size)),
        batch_size: cfg.batch_size,
        forward_ratio,
        total_ratio: sparse.total / dense.total,
        forward_compression_pct: (1.0 - forward_ratio) * 100.0,
        projections: bandwidths_gbps
            .iter()
            .map(|&g| Projection {
                bandwidth_gbps: g,
                sparse_secs_per_batch: secs(sparse.total, g),
                dense_secs_per_batch: secs(dense.total, g),
            })
            .collect(),
        sparse,
        dense,
    })
}
