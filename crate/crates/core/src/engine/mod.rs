//! Model-parallel training: partitioning, the per-batch
//! forward / gather / backward / reduce loop, hash-table maintenance,
//! the dense baseline and evaluation.

mod checkpoint;
mod cluster;
mod trainer;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{Activation, LayerSpec, OptimizerConfig};
use crate::lsh::{FamilyKind, FillPolicy, LshConfig};

pub use checkpoint::{load_manifest, Manifest, ManifestLayer, ManifestShard, MANIFEST_FILE};
pub use cluster::{drive, run_loopback, NodeOutcome, RunOptions};
pub use trainer::{BatchMetrics, BatchSelections, EpochSummary, EvalReport, NodeTrainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default = "one")]
    pub sparsity: f64,
    /// Hash family for active-neuron retrieval; unused when the layer is
    /// dense.
    #[serde(default)]
    pub lsh: Option<LshConfig>,
    #[serde(default = "uniform_fill")]
    pub fill: FillPolicy,
}

fn one() -> f64 {
    1.0
}

fn uniform_fill() -> FillPolicy {
    FillPolicy::UniformFill
}

impl LayerConfig {
    pub fn dense(out_dim: usize, activation: Activation) -> Self {
        LayerConfig {
            out_dim,
            activation,
            sparsity: 1.0,
            lsh: None,
            fill: FillPolicy::UniformFill,
        }
    }

    pub fn sparse(out_dim: usize, activation: Activation, sparsity: f64, lsh: LshConfig) -> Self {
        LayerConfig {
            out_dim,
            activation,
            sparsity,
            lsh: Some(lsh),
            fill: FillPolicy::UniformFill,
        }
    }

    /// Hash family settings, defaulting to SRP.
    pub fn lsh_config(&self) -> LshConfig {
        self.lsh.clone().unwrap_or_else(|| LshConfig::srp(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkSpec {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut in_dim = self.input_dim;
        self.layers
            .iter()
            .map(|l| {
                let s = LayerSpec {
                    in_dim,
                    out_dim: l.out_dim,
                    activation: l.activation,
                    sparsity: l.sparsity,
                };
                in_dim = l.out_dim;
                s
            })
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("network.layers: at least one layer is required"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("network.input_dim must be positive"));
        }
        let specs = self.layer_specs();
        for (k, (spec, cfg)) in specs.iter().zip(&self.layers).enumerate() {
            spec.validate(k + 1 == specs.len())
                .map_err(|e| Error::config(format!("network.layers[{k}]: {e}")))?;
            if let Some(lsh) = &cfg.lsh {
                lsh.validate()
                    .map_err(|e| Error::config(format!("network.layers[{k}].lsh: {e}")))?;
                if lsh.family == FamilyKind::Dwta && lsh.bin_size as usize > spec.in_dim {
                    return Err(Error::config(format!(
                        "network.layers[{k}].lsh: bin_size {} exceeds input dimension {}",
                        lsh.bin_size, spec.in_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Sparse,
    /// Every neuron active, full activation payloads on the wire.
    DenseBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    /// Gradient accumulation runs sample by sample in a fixed order.
    Deterministic,
    /// Samples are processed concurrently with unsynchronized gradient
    /// accumulation (f32 only).
    Hogwild,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Rebuild hash tables every this many batches.
    #[serde(default = "defaults::rebuild_period")]
    pub rebuild_period: u64,
    /// Draw fresh hash functions on every this many rebuilds.
    #[serde(default = "defaults::regen_every")]
    pub regenerate_every: u64,
    #[serde(default = "defaults::mode")]
    pub mode: TrainMode,
    #[serde(default = "defaults::parallelism")]
    pub parallelism: Parallelism,
    #[serde(default = "defaults::threads")]
    pub threads: usize,
    /// Seed for per-epoch shuffling; file order when absent.
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    /// Insert each sample's true labels into the output active set.
    #[serde(default = "defaults::label_forcing")]
    pub label_forcing: bool,
}

mod defaults {
    use super::{Parallelism, TrainMode};
    pub fn rebuild_period() -> u64 {
        50
    }
    pub fn regen_every() -> u64 {
        4
    }
    pub fn mode() -> TrainMode {
        TrainMode::Sparse
    }
    pub fn parallelism() -> Parallelism {
        Parallelism::Deterministic
    }
    pub fn threads() -> usize {
        1
    }
    pub fn label_forcing() -> bool {
        true
    }
}

impl TrainingConfig {
    pub fn new(batch_size: usize, epochs: usize) -> Self {
        TrainingConfig {
            batch_size,
            epochs,
            optimizer: OptimizerConfig::default(),
            rebuild_period: defaults::rebuild_period(),
            regenerate_every: defaults::regen_every(),
            mode: defaults::mode(),
            parallelism: defaults::parallelism(),
            threads: defaults::threads(),
            shuffle_seed: None,
            label_forcing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("training.epochs must be at least 1"));
        }
        if self.rebuild_period == 0 || self.regenerate_every == 0 {
            return Err(Error::config(
                "training.rebuild_period and training.regenerate_every must be at least 1",
            ));
        }
        if self.threads == 0 {
            return Err(Error::config("training.threads must be at least 1"));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::config(format!("training.optimizer: {e}")))
    }
}

/// Balanced contiguous ranges: the first `width mod n` shards get one extra
/// neuron.
pub fn partition_layer(width: usize, n: usize) -> Result<Vec<Range<usize>>> {
    if n == 0 || width < n {
        return Err(Error::config(format!(
            "cannot split a layer of {width} neurons across {n} nodes"
        )));
    }
    let (q, r) = (width / n, width % n);
    let mut start = 0;
    Ok((0..n)
        .map(|i| {
            let len = q + usize::from(i < r);
            let range = start..start + len;
            start += len;
            range
        })
        .collect())
}

/// Per layer, each node's global neuron range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub nodes: usize,
    pub layers: Vec<Vec<Range<usize>>>,
}

impl ShardPlan {
    pub fn new(net: &NetworkSpec, nodes: usize) -> Result<Self> {
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                partition_layer(l.out_dim, nodes)
                    .map_err(|e| Error::config(format!("network.layers[{k}]: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(ShardPlan { nodes, layers })
    }
}

/// Cross-checks network, training settings and cluster size.
pub fn validate_run(net: &NetworkSpec, cfg: &TrainingConfig, nodes: usize) -> Result<ShardPlan> {
    net.validate()?;
    cfg.validate()?;
    let plan = ShardPlan::new(net, nodes)?;
    if cfg.mode == TrainMode::Sparse {
        for (k, (spec, ranges)) in net.layer_specs().iter().zip(&plan.layers).enumerate() {
            if spec.is_dense() {
                continue;
            }
            let smallest = ranges.iter().map(|r| r.len()).min().unwrap_or(0);
            let budget = spec.shard_budget(nodes);
            if budget > smallest {
                return Err(Error::config(format!(
                    "network.layers[{k}]: per-shard budget {budget} exceeds shard size {smallest}"
                )));
            }
        }
    }
    Ok(plan)
}
