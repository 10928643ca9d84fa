//! Locality-sensitive hash families, per-shard hash-table indices and
//! budgeted active-neuron selection.

mod dwta;
mod index;
mod sampling;
mod srp;

pub use dwta::DwtaFamily;
pub use index::{build_index, rebuild, IndexStats, LshIndex, TableStats};
pub use sampling::{
    reservoir_sample, select_active, select_active_forced, FillPolicy, SelectionPolicy,
};
pub use srp::SrpFamily;
pub(crate) use sampling::Selector;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse::SparseVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Srp,
    Dwta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LshConfig {
    pub family: FamilyKind,
    /// Hash functions concatenated per table.
    pub hashes_per_table: u32,
    pub num_tables: u32,
    /// Window size for DWTA; ignored by SRP.
    #[serde(default = "default_bin_size")]
    pub bin_size: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_bin_size() -> u32 {
    8
}

impl LshConfig {
    pub fn srp(seed: u64) -> Self {
        LshConfig {
            family: FamilyKind::Srp,
            hashes_per_table: 9,
            num_tables: 8,
            bin_size: default_bin_size(),
            seed,
        }
    }

    pub fn dwta(seed: u64) -> Self {
        LshConfig {
            family: FamilyKind::Dwta,
            hashes_per_table: 6,
            num_tables: 8,
            bin_size: default_bin_size(),
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        LshConfig {
            seed,
            ..self.clone()
        }
    }

    /// Bits used by one DWTA code: positions `0..m` plus the sentinel `m`.
    pub fn dwta_code_bits(&self) -> u32 {
        32 - self.bin_size.leading_zeros()
    }

    pub fn bucket_bits(&self) -> u32 {
        match self.family {
            FamilyKind::Srp => self.hashes_per_table,
            FamilyKind::Dwta => self.hashes_per_table * self.dwta_code_bits(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hashes_per_table == 0 || self.num_tables == 0 {
            return Err(Error::config(
                "lsh: hashes_per_table and num_tables must be at least 1",
            ));
        }
        match self.family {
            FamilyKind::Srp if self.hashes_per_table > 32 => {
                Err(Error::config("lsh: srp bucket ids are limited to 32 bits"))
            }
            FamilyKind::Dwta if self.bin_size < 2 => {
                Err(Error::config("lsh: dwta bin_size must be at least 2"))
            }
            FamilyKind::Dwta if self.bucket_bits() > 32 => Err(Error::config(format!(
                "lsh: dwta bucket width {} bits exceeds 32",
                self.bucket_bits()
            ))),
            _ => Ok(()),
        }
    }
}

/// A generated hash family over a fixed key dimension.
#[derive(Debug, Clone)]
pub enum HashFamily {
    Srp(SrpFamily),
    Dwta(DwtaFamily),
}

impl HashFamily {
    pub fn generate(cfg: &LshConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.family {
            FamilyKind::Srp => HashFamily::Srp(SrpFamily::generate(cfg, dim)),
            FamilyKind::Dwta => HashFamily::Dwta(DwtaFamily::generate(cfg, dim)?),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            HashFamily::Srp(f) => f.dim(),
            HashFamily::Dwta(f) => f.dim(),
        }
    }

    pub fn num_tables(&self) -> usize {
        match self {
            HashFamily::Srp(f) => f.num_tables(),
            HashFamily::Dwta(f) => f.num_tables(),
        }
    }

    /// Bucket id for every table.
    pub fn hash_sparse<F: Real>(&self, key: &SparseVector<F>) -> Result<Vec<u32>> {
        if key.dim != self.dim() {
            return Err(Error::input(format!(
                "hash key dimension {} does not match family dimension {}",
                key.dim,
                self.dim()
            )));
        }
        Ok(match self {
            HashFamily::Srp(f) => f.hash_all(key.iter()),
            HashFamily::Dwta(f) => f.hash_all(key.iter()),
        })
    }

    pub fn hash_dense<F: Real>(&self, key: &[F]) -> Result<Vec<u32>> {
        if key.len() != self.dim() {
            return Err(Error::input(format!(
                "hash key dimension {} does not match family dimension {}",
                key.len(),
                self.dim()
            )));
        }
        let it = key.iter().enumerate().map(|(i, v)| (i as u32, *v));
        Ok(match self {
            HashFamily::Srp(f) => f.hash_all(it),
            HashFamily::Dwta(f) => f.hash_all(it),
        })
    }
}

/// splitmix64 finaliser; used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
