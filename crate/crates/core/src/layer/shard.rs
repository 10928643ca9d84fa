use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lsh::mix_seed;
use crate::real::Real;

/// The neurons `[global_offset, global_offset + local_count)` of one layer
/// together with their weights, biases and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronShard<F: Real = f32> {
    pub shard_id: usize,
    pub global_offset: usize,
    pub local_count: usize,
    pub in_dim: usize,
    /// Row-major, one row of `in_dim` weights per local neuron.
    pub weights: Vec<F>,
    pub biases: Vec<F>,
    pub m_w: Vec<F>,
    pub v_w: Vec<F>,
    pub m_b: Vec<F>,
    pub v_b: Vec<F>,
    /// Adam step count `t`.
    pub step: u64,
}

impl<F: Real> NeuronShard<F> {
    pub fn zeros(shard_id: usize, range: Range<usize>, in_dim: usize) -> Self {
        let local_count = range.len();
        let cells = local_count * in_dim;
        NeuronShard {
            shard_id,
            global_offset: range.start,
            local_count,
            in_dim,
            weights: vec![F::zero(); cells],
            biases: vec![F::zero(); local_count],
            m_w: vec![F::zero(); cells],
            v_w: vec![F::zero(); cells],
            m_b: vec![F::zero(); local_count],
            v_b: vec![F::zero(); local_count],
            step: 0,
        }
    }

    /// Weights uniform in `±1/sqrt(in_dim)`, biases zero. Row `g` is drawn
    /// from a generator keyed by `(layer_seed, g)`, so any partition of the
    /// layer reproduces the same full matrix.
    pub fn init_uniform(shard_id: usize, range: Range<usize>, in_dim: usize, layer_seed: u64) -> Self {
        let mut shard = Self::zeros(shard_id, range.clone(), in_dim);
        let bound = 1.0 / (in_dim as f64).sqrt();
        for (local, global) in range.enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(layer_seed, global as u64));
            for w in shard.row_mut(local) {
                *w = F::of_f64(rng.random_range(-bound..bound));
            }
        }
        shard
    }

    pub fn global_range(&self) -> Range<usize> {
        self.global_offset..self.global_offset + self.local_count
    }

    pub fn row(&self, local: usize) -> &[F] {
        &self.weights[local * self.in_dim..(local + 1) * self.in_dim]
    }

    pub fn row_mut(&mut self, local: usize) -> &mut [F] {
        &mut self.weights[local * self.in_dim..(local + 1) * self.in_dim]
    }

    pub fn to_local(&self, global: u32) -> Option<u32> {
        let g = global as usize;
        self.global_range()
            .contains(&g)
            .then(|| (g - self.global_offset) as u32)
    }

    pub fn cast<G: Real>(&self) -> NeuronShard<G> {
        let c = |v: &Vec<F>| v.iter().map(|x| G::of_f64(x.as_f64())).collect();
        NeuronShard {
            shard_id: self.shard_id,
            global_offset: self.global_offset,
            local_count: self.local_count,
            in_dim: self.in_dim,
            weights: c(&self.weights),
            biases: c(&self.biases),
            m_w: c(&self.m_w),
            v_w: c(&self.v_w),
            m_b: c(&self.m_b),
            v_b: c(&self.v_b),
            step: self.step,
        }
    }
}
