//! Snapshot wire format.
//!
//! Sparse layout, per sample: `[u32 count][u32 ids; count][value; count]`.
//! Dense layout, per sample: `[u32 count][value; count]` with the ids
//! implied by the sender's shard range. The batch size is known to every
//! node and is not sent. Values are little-endian at the scalar's width.

use std::ops::Range;

use super::{Endpoint, Payload, PayloadKind, Phase};
use crate::error::{Error, Result, TransportError};
use crate::layer::{LayerSnapshot, SampleActivations};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueField {
    Activations,
    Errors,
}

impl ValueField {
    fn kind(self) -> PayloadKind {
        match self {
            ValueField::Activations => PayloadKind::Activations,
            ValueField::Errors => PayloadKind::Errors,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotLayout {
    Sparse,
    Dense,
}

pub fn encode_snapshot<F: Real>(
    local: &LayerSnapshot<F>,
    field: ValueField,
    layout: SnapshotLayout,
    range: &Range<usize>,
) -> Result<Payload> {
    let mut p = Payload::new();
    for (s, sample) in local.samples.iter().enumerate() {
        let in_range = sample.ids.iter().all(|&id| range.contains(&(id as usize)));
        if !in_range {
            return Err(Error::Invariant(format!(
                "sample {s}: active id outside own shard range {range:?}"
            )));
        }
        if layout == SnapshotLayout::Dense && sample.len() != range.len() {
            return Err(Error::Invariant(format!(
                "sample {s}: dense layout needs all {} neurons, got {}",
                range.len(),
                sample.len()
            )));
        }
        p.push(PayloadKind::Counts, &(sample.len() as u32).to_le_bytes());
        if layout == SnapshotLayout::Sparse {
            p.bytes.reserve(4 * sample.len());
            sample.ids.iter().for_each(|id| p.bytes.extend_from_slice(&id.to_le_bytes()));
            p.tag(PayloadKind::ActiveIds, 4 * sample.len());
        }
        let values = match field {
            ValueField::Activations => &sample.activations,
            ValueField::Errors => &sample.errors,
        };
        p.bytes.reserve(F::BYTES * values.len());
        values.iter().for_each(|v| v.put_le(&mut p.bytes));
        p.tag(field.kind(), F::BYTES * values.len());
    }
    Ok(p)
}

fn protocol(rank: usize, detail: String) -> Error {
    TransportError::Protocol { rank, detail }.into()
}

/// Decodes one rank's contribution. The field not carried is zero-filled.
pub fn decode_part<F: Real>(
    bytes: &[u8],
    batch: usize,
    field: ValueField,
    layout: SnapshotLayout,
    range: &Range<usize>,
    width: usize,
    rank: usize,
) -> Result<LayerSnapshot<F>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let out = bytes
            .get(pos..pos + n)
            .ok_or_else(|| protocol(rank, "truncated snapshot payload".into()))?;
        pos += n;
        Ok(out)
    };
    let mut samples = Vec::with_capacity(batch);
    for _ in 0..batch {
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        if count > range.len() {
            return Err(protocol(rank, format!("count {count} exceeds shard size {}", range.len())));
        }
        let ids: Vec<u32> = match layout {
            SnapshotLayout::Sparse => take(4 * count)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            SnapshotLayout::Dense => {
                if count != range.len() {
                    return Err(protocol(rank, "dense sample does not cover the shard".into()));
                }
                range.clone().map(|g| g as u32).collect()
            }
        };
        let checked = layout == SnapshotLayout::Dense;
        if let Some(bad) = ids.iter().find(|&&id| !checked && !range.contains(&(id as usize))) {
            return Err(protocol(rank, format!("active id {bad} outside shard range {range:?}")));
        }
        let values: Vec<F> = take(F::BYTES * count)?
            .chunks_exact(F::BYTES)
            .map(F::get_le)
            .collect();
        let zeros = vec![F::zero(); count];
        let (activations, errors) = match field {
            ValueField::Activations => (values, zeros),
            ValueField::Errors => (zeros, values),
        };
        samples.push(SampleActivations {
            ids,
            activations,
            errors,
        });
    }
    if pos != bytes.len() {
        return Err(protocol(rank, format!("{} trailing bytes in snapshot", bytes.len() - pos)));
    }
    Ok(LayerSnapshot::single(width, samples))
}

/// Gathers every shard's partial snapshot and merges them in rank order.
/// `ranges[r]` is rank `r`'s global neuron range for this layer.
pub fn snapshot_sync<F: Real>(
    ep: &mut Endpoint,
    phase: Phase,
    local: &LayerSnapshot<F>,
    field: ValueField,
    layout: SnapshotLayout,
    ranges: &[Range<usize>],
) -> Result<LayerSnapshot<F>> {
    if ranges.len() != ep.size() {
        return Err(Error::Invariant("shard plan does not match cluster size".into()));
    }
    let payload = encode_snapshot(local, field, layout, &ranges[ep.rank()])?;
    let parts = ep.all_gather_var(phase, &payload)?;
    let batch = local.batch_len();
    let decoded = parts
        .iter()
        .enumerate()
        .map(|(r, b)| decode_part(b, batch, field, layout, &ranges[r], local.width, r))
        .collect::<Result<Vec<_>>>()?;
    LayerSnapshot::merge(decoded)
}

/// Logical bytes of one sparse sample entry block: count header plus ids
/// and values.
pub fn sparse_sample_bytes<F: Real>(active: usize) -> usize {
    4 + active * (4 + F::BYTES)
}
