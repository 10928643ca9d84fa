//! Recorded call scripts for checking that transports agree. Every node
//! derives the same call sequence from a seed and its own payloads from
//! `(seed, call, rank)`, so a script can be replayed on any transport.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{snapshot_sync, CommStats, Endpoint, Payload, PayloadKind, Phase, SnapshotLayout, ValueField};
use crate::error::Result;
use crate::layer::{LayerSnapshot, SampleActivations};
use crate::lsh::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Gather { max_len: usize },
    Reduce { len: usize },
    Barrier,
    Snapshot { batch: usize, width: usize },
}

pub fn generate(seed: u64, calls: usize) -> Vec<CallKind> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xca11));
    (0..calls)
        .map(|_| match rng.random_range(0..4u32) {
            0 => CallKind::Gather {
                max_len: rng.random_range(0..64),
            },
            1 => CallKind::Reduce {
                len: rng.random_range(1..40),
            },
            2 => CallKind::Barrier,
            _ => CallKind::Snapshot {
                batch: rng.random_range(1..5),
                width: rng.random_range(8..40),
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallResult {
    Gather(Vec<Vec<u8>>),
    /// Bit patterns of the reduced values.
    Reduce(Vec<u32>),
    Barrier,
    Snapshot {
        ids: Vec<Vec<u32>>,
        values: Vec<Vec<u32>>,
        counts: Vec<Vec<u32>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptOutcome {
    pub rank: usize,
    pub results: Vec<CallResult>,
    pub stats: CommStats,
}

fn even_ranges(width: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    let (q, r) = (width / n, width % n);
    let mut start = 0;
    (0..n)
        .map(|i| {
            let len = q + usize::from(i < r);
            let range = start..start + len;
            start += len;
            range
        })
        .collect()
}

pub fn run_script(ep: &mut Endpoint, seed: u64, calls: usize) -> Result<ScriptOutcome> {
    let (rank, n) = (ep.rank(), ep.size());
    let mut results = Vec::with_capacity(calls);
    for (i, call) in generate(seed, calls).into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, i as u64), rank as u64));
        let res = match call {
            CallKind::Gather { max_len } => {
                let len = rng.random_range(0..=max_len);
                let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
                CallResult::Gather(ep.all_gather_var(Phase::Control, &Payload::untagged(PayloadKind::Control, bytes))?)
            }
            CallKind::Reduce { len } => {
                let v: Vec<f32> = (0..len).map(|_| rng.random_range(-100.0..100.0)).collect();
                let out = ep.all_reduce_sum(Phase::GradReduce, &v, PayloadKind::InputErrors)?;
                CallResult::Reduce(out.iter().map(|x| x.to_bits()).collect())
            }
            CallKind::Barrier => {
                ep.barrier()?;
                CallResult::Barrier
            }
            CallKind::Snapshot { batch, width } => {
                let width = width.max(n);
                let ranges = even_ranges(width, n);
                let mine = ranges[rank].clone();
                let samples = (0..batch)
                    .map(|_| {
                        let ids: Vec<u32> = mine
                            .clone()
                            .filter(|_| rng.random_bool(0.5))
                            .map(|g| g as u32)
                            .collect();
                        let vals = ids.iter().map(|_| rng.random_range(-1.0f32..1.0)).collect();
                        SampleActivations::new(ids, vals)
                    })
                    .collect();
                let local = LayerSnapshot::single(width, samples);
                let g = snapshot_sync(ep, Phase::ForwardGather, &local, ValueField::Activations, SnapshotLayout::Sparse, &ranges)?;
                CallResult::Snapshot {
                    ids: g.samples.iter().map(|s| s.ids.clone()).collect(),
                    values: g
                        .samples
                        .iter()
                        .map(|s| s.activations.iter().map(|v| v.to_bits()).collect())
                        .collect(),
                    counts: g.shard_counts.clone(),
                }
            }
        };
        results.push(res);
    }
    Ok(ScriptOutcome {
        rank,
        results,
        stats: ep.stats(),
    })
}
