use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse::SparseVector;

/// Active neurons of one sample with their activations and backpropagated
/// errors. Ids are global and sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleActivations<F = f32> {
    pub ids: Vec<u32>,
    pub activations: Vec<F>,
    pub errors: Vec<F>,
}

impl<F: Real> SampleActivations<F> {
    pub fn new(ids: Vec<u32>, activations: Vec<F>) -> Self {
        let errors = vec![F::zero(); ids.len()];
        SampleActivations {
            ids,
            activations,
            errors,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position of a global id within this sample's active set.
    pub fn position(&self, id: u32) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }
}

/// Per-batch record for one layer: for each sample the active neurons,
/// their activations and errors; plus how many entries each shard
/// contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSnapshot<F = f32> {
    /// Full layer width.
    pub width: usize,
    pub samples: Vec<SampleActivations<F>>,
    /// `shard_counts[sample][shard]`
    pub shard_counts: Vec<Vec<u32>>,
}

impl<F: Real> LayerSnapshot<F> {
    /// Snapshot produced by a single shard.
    pub fn single(width: usize, samples: Vec<SampleActivations<F>>) -> Self {
        let shard_counts = samples.iter().map(|s| vec![s.len() as u32]).collect();
        LayerSnapshot {
            width,
            samples,
            shard_counts,
        }
    }

    pub fn batch_len(&self) -> usize {
        self.samples.len()
    }

    /// Total active entries across the batch.
    pub fn total_active(&self) -> usize {
        self.samples.iter().map(|s| s.len()).sum()
    }

    /// The sparse activation vector of one sample, used as the input of the
    /// next layer.
    pub fn input_vector(&self, sample: usize) -> SparseVector<F> {
        let s = &self.samples[sample];
        SparseVector::new_unchecked(s.ids.clone(), s.activations.clone(), self.width)
    }

    pub fn input_vectors(&self) -> Vec<SparseVector<F>> {
        (0..self.samples.len()).map(|s| self.input_vector(s)).collect()
    }

    /// Concatenates per-shard partial snapshots given in shard (rank)
    /// order. Shard ranges are contiguous and ordered, so the merged ids
    /// stay sorted.
    pub fn merge(parts: Vec<LayerSnapshot<F>>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invariant("merge of zero snapshots".into()))?;
        let width = first.width;
        let batch = first.samples.len();
        if parts.len() == 1 {
            let mut only = parts.into_iter().next().expect("one part");
            only.shard_counts = only.samples.iter().map(|s| vec![s.len() as u32]).collect();
            only.check_well_formed()?;
            return Ok(only);
        }
        let mut samples: Vec<SampleActivations<F>> = vec![SampleActivations::default(); batch];
        let mut shard_counts = vec![Vec::with_capacity(parts.len()); batch];
        for part in &parts {
            if part.width != width || part.samples.len() != batch {
                return Err(Error::Invariant(
                    "partial snapshots disagree on width or batch size".into(),
                ));
            }
            for (s, ps) in part.samples.iter().enumerate() {
                samples[s].ids.extend_from_slice(&ps.ids);
                samples[s].activations.extend_from_slice(&ps.activations);
                samples[s].errors.extend_from_slice(&ps.errors);
                shard_counts[s].push(ps.len() as u32);
            }
        }
        let merged = LayerSnapshot {
            width,
            samples,
            shard_counts,
        };
        merged.check_well_formed()?;
        Ok(merged)
    }

    /// Ids sorted, unique and in range; value arrays aligned.
    pub fn check_well_formed(&self) -> Result<()> {
        for (n, s) in self.samples.iter().enumerate() {
            if s.activations.len() != s.ids.len() || s.errors.len() != s.ids.len() {
                return Err(Error::Invariant(format!(
                    "sample {n}: value arrays not aligned with active ids"
                )));
            }
            for (i, &id) in s.ids.iter().enumerate() {
                if id as usize >= self.width || (i > 0 && id <= s.ids[i - 1]) {
                    return Err(Error::Invariant(format!(
                        "sample {n}: active id {id} at position {i} unsorted, duplicated or out of range"
                    )));
                }
            }
        }
        Ok(())
    }
}
