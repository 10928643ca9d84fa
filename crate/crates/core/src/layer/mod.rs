//! One node's partition of a fully connected layer and the kernels that run
//! on it: sparse feed forward, softmax output handling, sparse
//! backpropagation and lazy Adam updates.

mod adam;
pub mod checkpoint;
mod kernels;
mod shard;
mod snapshot;

pub use adam::{adam_step, GradAccumulator, OptimizerConfig};
pub use kernels::{
    apply_relu_mask, backward_shard, backward_shard_hogwild, compute_output_distribution,
    forward_shard, forward_shard_par, output_error, ForwardActivation,
};
pub use shard::NeuronShard;
pub use snapshot::{LayerSnapshot, SampleActivations};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

/// Shape and sparsity of one full layer (all shards together).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    /// Full layer width across all shards.
    pub out_dim: usize,
    pub activation: Activation,
    /// Fraction of neurons activated per sample, in (0, 1].
    pub sparsity: f64,
}

impl LayerSpec {
    pub fn validate(&self, is_last: bool) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::config("layer dimensions must be positive"));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::config(format!(
                "layer sparsity {} outside (0, 1]",
                self.sparsity
            )));
        }
        if self.sparsity * (self.out_dim as f64) < 1.0 - 1e-9 {
            return Err(Error::config(format!(
                "sparsity {} activates no neuron of a {}-wide layer",
                self.sparsity, self.out_dim
            )));
        }
        match (self.activation, is_last) {
            (Activation::Softmax, false) => {
                Err(Error::config("softmax is only allowed on the final layer"))
            }
            (Activation::Relu, true) => Err(Error::config("the final layer must be softmax")),
            _ => Ok(()),
        }
    }

    /// Whether every neuron is active for every sample.
    pub fn is_dense(&self) -> bool {
        self.sparsity >= 1.0
    }

    /// Active neurons per sample across the whole layer,
    /// `ceil(sparsity * width)`.
    pub fn total_active(&self) -> usize {
        let k = (self.sparsity * self.out_dim as f64 - 1e-9).ceil() as usize;
        k.clamp(1, self.out_dim)
    }

    /// Per-shard budget `ceil(total_active / nodes)`.
    pub fn shard_budget(&self, nodes: usize) -> usize {
        self.total_active().div_ceil(nodes.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(out_dim: usize, sparsity: f64) -> LayerSpec {
        LayerSpec {
            in_dim: 4,
            out_dim,
            activation: Activation::Softmax,
            sparsity,
        }
    }

    #[test]
    fn budgets() {
        assert_eq!(spec(100_000, 0.00512).total_active(), 512);
        assert_eq!(spec(100_000, 0.00512).shard_budget(2), 256);
        assert_eq!(spec(5000, 0.05).shard_budget(2), 125);
        assert_eq!(spec(10, 0.25).shard_budget(4), 1);
        assert_eq!(spec(10, 1.0).total_active(), 10);
    }

    #[test]
    fn validation() {
        assert!(spec(10, 0.05).validate(true).is_err());
        assert!(spec(10, 0.1).validate(true).is_ok());
        assert!(spec(10, 0.0).validate(true).is_err());
        assert!(spec(10, 1.5).validate(true).is_err());
        assert!(spec(10, 1.0).validate(false).is_err());
        let hidden = LayerSpec {
            activation: Activation::Relu,
            ..spec(10, 1.0)
        };
        assert!(hidden.validate(false).is_ok());
        assert!(hidden.validate(true).is_err());
    }
}
