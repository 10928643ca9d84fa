//! Collective operations across the nodes of a cluster: variable-length
//! all-gather, rank-ordered all-reduce-sum and barrier, with logical byte
//! accounting shared by every transport.

mod loopback;
pub mod script;
mod tcp;
pub mod wire;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TransportError};
use crate::real::Real;

pub use loopback::{LoopbackCluster, LoopbackOptions};
pub use tcp::{connect_tcp, TcpOptions};
pub use wire::{snapshot_sync, SnapshotLayout, ValueField};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Training stage a collective belongs to, for the per-phase breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ForwardGather,
    ErrorSync,
    GradReduce,
    Eval,
    Control,
}

/// Content type of a byte range inside a payload. The weight-locality audit
/// checks that nothing tagged [`PayloadKind::Weights`] is ever sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Counts,
    ActiveIds,
    Activations,
    Errors,
    InputErrors,
    Control,
    Weights,
}

/// Bytes handed to a collective, with every range tagged by kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Payload {
    pub bytes: Vec<u8>,
    pub tags: Vec<(PayloadKind, usize)>,
}

impl Payload {
    pub fn new() -> Self {
        Payload::default()
    }

    pub fn untagged(kind: PayloadKind, bytes: Vec<u8>) -> Self {
        let n = bytes.len();
        Payload {
            bytes,
            tags: vec![(kind, n)],
        }
    }

    /// Appends bytes of one kind, merging with the previous tag when equal.
    pub fn push(&mut self, kind: PayloadKind, data: &[u8]) {
        self.bytes.extend_from_slice(data);
        self.tag(kind, data.len());
    }

    pub fn tag(&mut self, kind: PayloadKind, len: usize) {
        if len == 0 {
            return;
        }
        match self.tags.last_mut() {
            Some((k, n)) if *k == kind => *n += len,
            _ => self.tags.push((kind, len)),
        }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    fn tagged_len(&self) -> usize {
        self.tags.iter().map(|(_, n)| n).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub calls: u64,
    /// Sum of every rank's logical contribution; the same on all nodes.
    pub payload_bytes: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// Traffic counters of one endpoint. Only logical payload is counted, never
/// framing, handshakes or status bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub collective_calls: u64,
    pub phases: BTreeMap<Phase, PhaseStats>,
    /// This node's contributed bytes by payload kind.
    pub sent_by_kind: BTreeMap<PayloadKind, u64>,
}

impl CommStats {
    pub fn phase(&self, p: Phase) -> PhaseStats {
        self.phases.get(&p).cloned().unwrap_or_default()
    }

    pub fn payload_bytes(&self, p: Phase) -> u64 {
        self.phase(p).payload_bytes
    }

    pub fn kind_bytes(&self, k: PayloadKind) -> u64 {
        self.sent_by_kind.get(&k).copied().unwrap_or(0)
    }

    /// Counter increments between `earlier` and `self`.
    pub fn since(&self, earlier: &CommStats) -> CommStats {
        let mut phases = BTreeMap::new();
        for (p, s) in &self.phases {
            let e = earlier.phase(*p);
            phases.insert(
                *p,
                PhaseStats {
                    calls: s.calls - e.calls,
                    payload_bytes: s.payload_bytes - e.payload_bytes,
                    bytes_sent: s.bytes_sent - e.bytes_sent,
                    bytes_received: s.bytes_received - e.bytes_received,
                },
            );
        }
        let sent_by_kind = self
            .sent_by_kind
            .iter()
            .map(|(k, v)| (*k, v - earlier.kind_bytes(*k)))
            .collect();
        CommStats {
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
            collective_calls: self.collective_calls - earlier.collective_calls,
            phases,
            sent_by_kind,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("stats serialize")
    }

    fn record(&mut self, phase: Phase, payload_bytes: u64, sent: u64, received: u64) {
        self.bytes_sent += sent;
        self.bytes_received += received;
        self.collective_calls += 1;
        let p = self.phases.entry(phase).or_default();
        p.calls += 1;
        p.payload_bytes += payload_bytes;
        p.bytes_sent += sent;
        p.bytes_received += received;
    }
}

/// Wire operation codes; also used to detect mismatched call sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub(crate) enum Op {
    Gather = 1,
    ReduceGather = 2,
    Broadcast = 3,
    Barrier = 4,
}

impl Op {
    pub(crate) fn from_u8(v: u8) -> Option<Op> {
        Some(match v {
            1 => Op::Gather,
            2 => Op::ReduceGather,
            3 => Op::Broadcast,
            4 => Op::Barrier,
            _ => return None,
        })
    }

    pub(crate) fn name(self) -> &'static str {
        match self {
            Op::Gather => "all_gather",
            Op::ReduceGather => "all_reduce",
            Op::Broadcast => "all_reduce",
            Op::Barrier => "barrier",
        }
    }
}

/// Raw message movement. Implementations deliver bytes only; semantics and
/// accounting live in [`Endpoint`].
pub(crate) trait Transport: Send {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    /// Every rank receives every rank's bytes, in rank order.
    fn all_gather(&mut self, seq: u64, op: Op, data: &[u8]) -> Result<Vec<Vec<u8>>, TransportError>;
    /// Rank 0 receives every rank's bytes; other ranks get `None`.
    fn gather_root(&mut self, seq: u64, data: &[u8]) -> Result<Option<Vec<Vec<u8>>>, TransportError>;
    /// Rank 0 supplies `data`; every rank returns it.
    fn broadcast_root(&mut self, seq: u64, data: Option<&[u8]>) -> Result<Vec<u8>, TransportError>;
}

/// One node's handle on the cluster. Collectives take `&mut self`, so at
/// most one is in flight per endpoint.
pub struct Endpoint {
    transport: Box<dyn Transport>,
    seq: u64,
    stats: Arc<Mutex<CommStats>>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("rank", &self.rank())
            .field("size", &self.size())
            .field("seq", &self.seq)
            .finish()
    }
}

const REDUCE_OK: u8 = 0;
const REDUCE_LENGTH_MISMATCH: u8 = 1;

impl Endpoint {
    pub(crate) fn new(transport: Box<dyn Transport>) -> Self {
        Endpoint {
            transport,
            seq: 0,
            stats: Arc::new(Mutex::new(CommStats::default())),
        }
    }

    pub fn rank(&self) -> usize {
        self.transport.rank()
    }

    pub fn size(&self) -> usize {
        self.transport.size()
    }

    /// Number of collectives issued so far.
    pub fn sequence(&self) -> u64 {
        self.seq
    }

    pub fn stats(&self) -> CommStats {
        self.stats.lock().expect("stats lock").clone()
    }

    /// Shared handle for reading counters from another thread.
    pub fn stats_handle(&self) -> Arc<Mutex<CommStats>> {
        Arc::clone(&self.stats)
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    /// Every node receives every node's payload, ordered by rank.
    pub fn all_gather_var(&mut self, phase: Phase, payload: &Payload) -> Result<Vec<Vec<u8>>> {
        debug_assert_eq!(payload.tagged_len(), payload.len(), "untagged payload bytes");
        let seq = self.next_seq();
        let parts = self.transport.all_gather(seq, Op::Gather, &payload.bytes)?;
        let (rank, n) = (self.rank(), self.size());
        let total: u64 = parts.iter().map(|p| p.len() as u64).sum();
        let own = parts[rank].len() as u64;
        let mut st = self.stats.lock().expect("stats lock");
        st.record(phase, total, own * (n as u64 - 1), total - own);
        for (k, len) in &payload.tags {
            *st.sent_by_kind.entry(*k).or_default() += *len as u64;
        }
        Ok(parts)
    }

    /// Element-wise sum over all nodes, accumulated in rank order 0..n-1
    /// on rank 0 and broadcast.
    pub fn all_reduce_sum<F: Real>(&mut self, phase: Phase, local: &[F], kind: PayloadKind) -> Result<Vec<F>> {
        let seq = self.next_seq();
        let mut bytes = Vec::with_capacity(local.len() * F::BYTES);
        for v in local {
            v.put_le(&mut bytes);
        }
        let parts = self.transport.gather_root(seq, &bytes)?;
        let reply = match parts {
            Some(parts) => {
                let mut out = vec![REDUCE_OK];
                let mut acc: Vec<F> = decode_reals(&parts[0]);
                let mut bad = None;
                for (r, p) in parts.iter().enumerate().skip(1) {
                    if p.len() != parts[0].len() {
                        bad = Some(r);
                        break;
                    }
                    for (a, c) in acc.iter_mut().zip(p.chunks_exact(F::BYTES)) {
                        *a += F::get_le(c);
                    }
                }
                match bad {
                    Some(r) => {
                        out[0] = REDUCE_LENGTH_MISMATCH;
                        out.extend_from_slice(&(r as u32).to_le_bytes());
                    }
                    None => acc.iter().for_each(|v| v.put_le(&mut out)),
                }
                self.transport.broadcast_root(seq, Some(&out))?
            }
            None => self.transport.broadcast_root(seq, None)?,
        };
        match reply.first() {
            Some(&REDUCE_OK) => {}
            Some(&REDUCE_LENGTH_MISMATCH) if reply.len() >= 5 => {
                let r = u32::from_le_bytes(reply[1..5].try_into().expect("4 bytes")) as usize;
                return Err(TransportError::Protocol {
                    rank: r,
                    detail: "all_reduce vector length differs from rank 0".into(),
                }
                .into());
            }
            _ => {
                return Err(TransportError::Protocol {
                    rank: 0,
                    detail: "malformed all_reduce reply".into(),
                }
                .into())
            }
        }
        let result: Vec<F> = decode_reals(&reply[1..]);
        if result.len() != local.len() {
            return Err(TransportError::Protocol {
                rank: 0,
                detail: "all_reduce result length differs from local vector".into(),
            }
            .into());
        }
        let n = self.size() as u64;
        let m = bytes.len() as u64;
        let (sent, received) = if n == 1 {
            (0, 0)
        } else if self.rank() == 0 {
            ((n - 1) * m, (n - 1) * m)
        } else {
            (m, m)
        };
        let mut st = self.stats.lock().expect("stats lock");
        st.record(phase, n * m, sent, received);
        *st.sent_by_kind.entry(kind).or_default() += m;
        Ok(result)
    }

    /// Returns once every node has entered.
    pub fn barrier(&mut self) -> Result<()> {
        let seq = self.next_seq();
        self.transport.all_gather(seq, Op::Barrier, &[])?;
        self.stats.lock().expect("stats lock").record(Phase::Control, 0, 0, 0);
        Ok(())
    }
}

pub(crate) fn decode_reals<F: Real>(b: &[u8]) -> Vec<F> {
    b.chunks_exact(F::BYTES).map(F::get_le).collect()
}
