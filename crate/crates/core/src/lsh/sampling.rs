use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LshIndex;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse::SparseVector;

/// Classic reservoir sampling (Algorithm R). Every item of a stream longer
/// than `k` ends up in the result with probability `k / len`.
pub fn reservoir_sample<T, R: Rng + ?Sized>(
    stream: impl IntoIterator<Item = T>,
    k: usize,
    rng: &mut R,
) -> Vec<T> {
    let mut reservoir = Vec::with_capacity(k);
    if k == 0 {
        return reservoir;
    }
    for (i, item) in stream.into_iter().enumerate() {
        if i < k {
            reservoir.push(item);
        } else {
            let j = rng.random_range(0..=i);
            if j < k {
                reservoir[j] = item;
            }
        }
    }
    reservoir
}

/// What to do when the hash tables return fewer neurons than the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Top up with neurons drawn uniformly from the rest of the shard.
    UniformFill,
    /// Keep only what the tables returned.
    StopEarly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionPolicy {
    budget: usize,
    pub fill: FillPolicy,
    pub rng_seed: u64,
}

impl SelectionPolicy {
    pub fn new(budget: usize, fill: FillPolicy, rng_seed: u64) -> Result<Self> {
        if budget == 0 {
            return Err(Error::config("selection budget must be at least 1"));
        }
        Ok(SelectionPolicy {
            budget,
            fill,
            rng_seed,
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }
}

/// Reusable scratch for repeated selections against indices of up to
/// `capacity` neurons.
#[derive(Debug, Default)]
pub(crate) struct Selector {
    seen: Vec<u32>,
    stamp: u32,
    candidates: Vec<u32>,
}

impl Selector {
    pub fn new() -> Self {
        Selector::default()
    }

    fn next_stamp(&mut self, n: usize) -> u32 {
        if self.seen.len() < n {
            self.seen.resize(n, 0);
        }
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.seen.iter_mut().for_each(|s| *s = 0);
            self.stamp = 1;
        }
        self.stamp
    }

    /// Active local ids for one sample, sorted ascending. `forced` ids are
    /// always included and count against the budget.
    pub fn select<F: Real, R: Rng + ?Sized>(
        &mut self,
        index: &LshIndex,
        query: &SparseVector<F>,
        policy: &SelectionPolicy,
        forced: &[u32],
        rng: &mut R,
    ) -> Result<Vec<u32>> {
        let n = index.neuron_count();
        let stamp = self.next_stamp(n);
        let mut selected = Vec::with_capacity(policy.budget.min(n).max(forced.len()));
        for &id in forced {
            if id as usize >= n {
                return Err(Error::input(format!(
                    "forced neuron {id} outside shard of {n} neurons"
                )));
            }
            if self.seen[id as usize] != stamp {
                self.seen[id as usize] = stamp;
                selected.push(id);
            }
        }
        if selected.len() >= policy.budget {
            selected.sort_unstable();
            return Ok(selected);
        }
        let buckets = index.query_buckets(query)?;
        self.candidates.clear();
        let mut cands = std::mem::take(&mut self.candidates);
        index.candidates_into(&buckets, &mut self.seen, stamp, &mut cands);
        let room = policy.budget - selected.len();
        if cands.len() > room {
            selected.extend(reservoir_sample(cands.iter().copied(), room, rng));
        } else {
            selected.extend_from_slice(&cands);
            let target = policy.budget.min(n);
            if policy.fill == FillPolicy::UniformFill && selected.len() < target {
                let need = target - selected.len();
                let free = n - selected.len();
                if need * 2 <= free {
                    while selected.len() < target {
                        let r = rng.random_range(0..n as u32);
                        if self.seen[r as usize] != stamp {
                            self.seen[r as usize] = stamp;
                            selected.push(r);
                        }
                    }
                } else {
                    let mut rest: Vec<u32> = (0..n as u32)
                        .filter(|&id| self.seen[id as usize] != stamp)
                        .collect();
                    let (picked, _) = rest.partial_shuffle(rng, need);
                    selected.extend_from_slice(picked);
                }
            }
        }
        self.candidates = cands;
        selected.sort_unstable();
        Ok(selected)
    }
}

/// Budgeted active-neuron selection for one query.
pub fn select_active<F: Real, R: Rng + ?Sized>(
    index: &LshIndex,
    query: &SparseVector<F>,
    policy: &SelectionPolicy,
    rng: &mut R,
) -> Result<Vec<u32>> {
    Selector::new().select(index, query, policy, &[], rng)
}

/// As [`select_active`], with `forced` local ids placed in the active set
/// ahead of the hash-table candidates.
pub fn select_active_forced<F: Real, R: Rng + ?Sized>(
    index: &LshIndex,
    query: &SparseVector<F>,
    policy: &SelectionPolicy,
    forced: &[u32],
    rng: &mut R,
) -> Result<Vec<u32>> {
    Selector::new().select(index, query, policy, forced, rng)
}
