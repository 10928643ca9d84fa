//! In-process cluster: every node is a thread, messages meet in a shared
//! table keyed by call sequence number.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Endpoint, Op, Transport, DEFAULT_TIMEOUT};
use crate::error::TransportError;
use crate::lsh::mix_seed;

#[derive(Debug, Clone, Copy)]
pub struct LoopbackOptions {
    pub timeout: Duration,
    /// When set, each node yields a random number of times before every
    /// collective to perturb the interleaving. Results must not change.
    pub scheduler_seed: Option<u64>,
}

impl Default for LoopbackOptions {
    fn default() -> Self {
        LoopbackOptions {
            timeout: DEFAULT_TIMEOUT,
            scheduler_seed: None,
        }
    }
}

struct Slot {
    op: Op,
    data: Vec<Option<Arc<Vec<u8>>>>,
    present: Vec<bool>,
    arrived: usize,
    taken: usize,
}

struct State {
    slots: HashMap<u64, Slot>,
    departed: Vec<bool>,
}

struct Shared {
    n: usize,
    state: Mutex<State>,
    cv: Condvar,
}

pub struct LoopbackCluster;

impl LoopbackCluster {
    /// Creates `n` connected endpoints, rank `i` at index `i`.
    pub fn endpoints(n: usize, opts: LoopbackOptions) -> Vec<Endpoint> {
        assert!(n >= 1, "a cluster needs at least one node");
        let shared = Arc::new(Shared {
            n,
            state: Mutex::new(State {
                slots: HashMap::new(),
                departed: vec![false; n],
            }),
            cv: Condvar::new(),
        });
        (0..n)
            .map(|rank| {
                Endpoint::new(Box::new(LoopbackTransport {
                    rank,
                    shared: Arc::clone(&shared),
                    timeout: opts.timeout,
                    jitter: opts
                        .scheduler_seed
                        .map(|s| ChaCha8Rng::seed_from_u64(mix_seed(s, rank as u64))),
                }))
            })
            .collect()
    }

    /// Runs `f` on every node in its own thread and returns the results in
    /// rank order.
    pub fn run<R: Send>(
        n: usize,
        opts: LoopbackOptions,
        f: impl Fn(Endpoint) -> R + Sync,
    ) -> Vec<R> {
        let endpoints = Self::endpoints(n, opts);
        std::thread::scope(|s| {
            let handles: Vec<_> = endpoints
                .into_iter()
                .map(|ep| {
                    let f = &f;
                    s.spawn(move || f(ep))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("loopback node panicked"))
                .collect()
        })
    }
}

struct LoopbackTransport {
    rank: usize,
    shared: Arc<Shared>,
    timeout: Duration,
    jitter: Option<ChaCha8Rng>,
}

impl LoopbackTransport {
    fn exchange(
        &mut self,
        seq: u64,
        op: Op,
        data: Option<&[u8]>,
    ) -> Result<Vec<Option<Arc<Vec<u8>>>>, TransportError> {
        if let Some(rng) = self.jitter.as_mut() {
            for _ in 0..rng.random_range(0..4u32) {
                std::thread::yield_now();
            }
        }
        let n = self.shared.n;
        // the two stages of a reduce share a sequence number
        let key = (seq << 1) | u64::from(op == Op::Broadcast);
        let deadline = Instant::now() + self.timeout;
        let mut st = self.shared.state.lock().expect("loopback lock");
        let slot = st.slots.entry(key).or_insert_with(|| Slot {
            op,
            data: vec![None; n],
            present: vec![false; n],
            arrived: 0,
            taken: 0,
        });
        if slot.op != op {
            let other = slot.present.iter().position(|&p| p).unwrap_or(0);
            return Err(TransportError::Protocol {
                rank: other,
                detail: format!(
                    "call {seq}: rank {} issued {:?} while rank {other} issued {:?}",
                    self.rank, op, slot.op
                ),
            });
        }
        if slot.present[self.rank] {
            return Err(TransportError::Protocol {
                rank: self.rank,
                detail: format!("call {seq} entered twice"),
            });
        }
        slot.present[self.rank] = true;
        slot.data[self.rank] = data.map(|d| Arc::new(d.to_vec()));
        slot.arrived += 1;
        self.shared.cv.notify_all();
        loop {
            let slot = st.slots.get(&key).expect("slot kept until all ranks took it");
            if slot.arrived == n {
                break;
            }
            let missing: Vec<usize> = (0..n).filter(|&r| !slot.present[r]).collect();
            if let Some(&gone) = missing.iter().find(|&&r| st.departed[r]) {
                return Err(TransportError::Disconnected {
                    rank: gone,
                    detail: format!("left the cluster before call {seq}"),
                });
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::Timeout {
                    op: op.name(),
                    secs: self.timeout.as_secs_f64(),
                    missing,
                });
            }
            st = self
                .shared
                .cv
                .wait_timeout(st, deadline - now)
                .expect("loopback lock")
                .0;
        }
        let slot = st.slots.get_mut(&key).expect("slot present");
        let out = slot.data.clone();
        slot.taken += 1;
        if slot.taken == n {
            st.slots.remove(&key);
        }
        Ok(out)
    }
}

fn unwrap_all(parts: Vec<Option<Arc<Vec<u8>>>>) -> Vec<Vec<u8>> {
    parts
        .into_iter()
        .map(|p| p.map(|a| a.as_ref().clone()).unwrap_or_default())
        .collect()
}

impl Transport for LoopbackTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.shared.n
    }

    fn all_gather(&mut self, seq: u64, op: Op, data: &[u8]) -> Result<Vec<Vec<u8>>, TransportError> {
        Ok(unwrap_all(self.exchange(seq, op, Some(data))?))
    }

    fn gather_root(&mut self, seq: u64, data: &[u8]) -> Result<Option<Vec<Vec<u8>>>, TransportError> {
        let parts = self.exchange(seq, Op::ReduceGather, Some(data))?;
        Ok((self.rank == 0).then(|| unwrap_all(parts)))
    }

    fn broadcast_root(&mut self, seq: u64, data: Option<&[u8]>) -> Result<Vec<u8>, TransportError> {
        let data = if self.rank == 0 { data } else { None };
        let parts = self.exchange(seq, Op::Broadcast, data)?;
        parts[0]
            .as_ref()
            .map(|a| a.as_ref().clone())
            .ok_or_else(|| TransportError::Protocol {
                rank: 0,
                detail: "broadcast without root data".into(),
            })
    }
}

impl Drop for LoopbackTransport {
    fn drop(&mut self) {
        if let Ok(mut st) = self.shared.state.lock() {
            st.departed[self.rank] = true;
        }
        self.shared.cv.notify_all();
    }
}
