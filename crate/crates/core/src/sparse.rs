//! Sparse vectors, labelled records and batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// A specific broken invariant, with the offending position.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("indices ({indices}) and values ({values}) differ in length")]
    LengthMismatch { indices: usize, values: usize },
    #[error("indices not strictly increasing at position {position}")]
    NotIncreasing { position: usize },
    #[error("index {index} at position {position} out of range for dimension {dim}")]
    IndexOutOfRange {
        position: usize,
        index: u32,
        dim: usize,
    },
    #[error("feature dimension {found} does not match expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("label {label} at position {position} out of range for label dimension {label_dim}")]
    LabelOutOfRange {
        position: usize,
        label: u32,
        label_dim: usize,
    },
}

/// Index/value pairs over a space of `dim` coordinates. Indices are kept
/// strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector<F = f32> {
    pub indices: Vec<u32>,
    pub values: Vec<F>,
    pub dim: usize,
}

impl<F: Real> SparseVector<F> {
    pub fn new(indices: Vec<u32>, values: Vec<F>, dim: usize) -> Result<Self, Violation> {
        let v = SparseVector {
            indices,
            values,
            dim,
        };
        v.validate()?;
        Ok(v)
    }

    /// Builds without checking; callers guarantee the invariants.
    pub fn new_unchecked(indices: Vec<u32>, values: Vec<F>, dim: usize) -> Self {
        debug_assert!(
            SparseVector {
                indices: indices.clone(),
                values: values.clone(),
                dim
            }
            .validate()
            .is_ok()
        );
        SparseVector {
            indices,
            values,
            dim,
        }
    }

    pub fn empty(dim: usize) -> Self {
        SparseVector {
            indices: Vec::new(),
            values: Vec::new(),
            dim,
        }
    }

    /// Keeps every coordinate, zeros included.
    pub fn from_dense(values: &[F]) -> Self {
        SparseVector {
            indices: (0..values.len() as u32).collect(),
            values: values.to_vec(),
            dim: values.len(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// True when every coordinate is stored.
    pub fn is_full(&self) -> bool {
        self.indices.len() == self.dim
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, F)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn to_dense(&self) -> Vec<F> {
        let mut out = vec![F::zero(); self.dim];
        for (i, v) in self.iter() {
            out[i as usize] = v;
        }
        out
    }

    pub fn scaled(&self, c: F) -> Self {
        SparseVector {
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| *v * c).collect(),
            dim: self.dim,
        }
    }

    pub fn validate(&self) -> Result<(), Violation> {
        if self.indices.len() != self.values.len() {
            return Err(Violation::LengthMismatch {
                indices: self.indices.len(),
                values: self.values.len(),
            });
        }
        for (position, &index) in self.indices.iter().enumerate() {
            if position > 0 && index <= self.indices[position - 1] {
                return Err(Violation::NotIncreasing { position });
            }
            if index as usize >= self.dim {
                return Err(Violation::IndexOutOfRange {
                    position,
                    index,
                    dim: self.dim,
                });
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> SparseVector<G> {
        SparseVector {
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| G::of_f64(v.as_f64())).collect(),
            dim: self.dim,
        }
    }
}

/// `Σ a.values[i] * b[a.indices[i]]`, evaluated in index order.
pub fn sparse_dot<F: Real>(a: &SparseVector<F>, b: &[F]) -> Result<F> {
    if a.dim != b.len() {
        return Err(Error::input(format!(
            "sparse_dot: vector dimension {} does not match weight length {}",
            a.dim,
            b.len()
        )));
    }
    Ok(sparse_dot_unchecked(&a.indices, &a.values, b))
}

#[inline]
pub(crate) fn sparse_dot_unchecked<F: Real>(indices: &[u32], values: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&i, &v) in indices.iter().zip(values) {
        acc = acc + v * b[i as usize];
    }
    acc
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub features: SparseVector<f32>,
    pub labels: Vec<u32>,
}

/// Checks the sparse-vector invariants plus feature and label ranges.
pub fn validate_record(
    r: &DataRecord,
    feature_dim: usize,
    label_dim: usize,
) -> Result<(), Violation> {
    r.features.validate()?;
    if r.features.dim != feature_dim {
        return Err(Violation::DimMismatch {
            expected: feature_dim,
            found: r.features.dim,
        });
    }
    for (position, &label) in r.labels.iter().enumerate() {
        if label as usize >= label_dim {
            return Err(Violation::LabelOutOfRange {
                position,
                label,
                label_dim,
            });
        }
    }
    Ok(())
}

/// Up to `capacity` records processed together. The final batch of an
/// epoch may be short.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub records: Vec<&'a DataRecord>,
    pub capacity: usize,
}

impl<'a> Batch<'a> {
    pub fn new(records: Vec<&'a DataRecord>, capacity: usize) -> Result<Self> {
        if records.is_empty() || records.len() > capacity {
            return Err(Error::input(format!(
                "batch holds {} records, expected 1..={capacity}",
                records.len()
            )));
        }
        Ok(Batch { records, capacity })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
