use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{HashFamily, LshConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::sparse::SparseVector;

/// Hash tables over the weight vectors of the neurons one shard owns.
/// Neuron ids stored in the tables are local to the shard.
#[derive(Debug, Clone)]
pub struct LshIndex {
    config: LshConfig,
    family: Arc<HashFamily>,
    tables: Vec<HashMap<u32, Vec<u32>>>,
    owner_shard: usize,
    neuron_count: usize,
    /// Bumped on every rebuild.
    pub generation: u64,
}

/// Indexes `weights` (row-major, one row of `dim` values per local neuron).
pub fn build_index<F: Real>(
    weights: &[F],
    dim: usize,
    owner: usize,
    cfg: &LshConfig,
) -> Result<LshIndex> {
    let family = Arc::new(HashFamily::generate(cfg, dim)?);
    LshIndex::with_family(weights, dim, owner, cfg.clone(), family, 0)
}

/// Re-indexes `weights`. With `new_seed` fresh hash functions are drawn;
/// otherwise the existing family is reused. The old index is untouched.
pub fn rebuild<F: Real>(index: &LshIndex, weights: &[F], new_seed: Option<u64>) -> Result<LshIndex> {
    let dim = index.family.dim();
    if dim > 0 && weights.len() != index.neuron_count * dim {
        return Err(Error::input(format!(
            "rebuild: expected {} neurons of dimension {dim}, got {} values",
            index.neuron_count,
            weights.len()
        )));
    }
    let (cfg, family) = match new_seed {
        Some(seed) => {
            let cfg = index.config.with_seed(seed);
            let family = Arc::new(HashFamily::generate(&cfg, dim)?);
            (cfg, family)
        }
        None => (index.config.clone(), index.family.clone()),
    };
    LshIndex::with_family(weights, dim, index.owner_shard, cfg, family, index.generation + 1)
}

impl LshIndex {
    fn with_family<F: Real>(
        weights: &[F],
        dim: usize,
        owner: usize,
        config: LshConfig,
        family: Arc<HashFamily>,
        generation: u64,
    ) -> Result<Self> {
        if family.dim() != dim {
            return Err(Error::input("hash family dimension differs from weights"));
        }
        if dim == 0 || weights.len() % dim != 0 {
            return Err(Error::input(format!(
                "weights length {} is not a multiple of dimension {dim}",
                weights.len()
            )));
        }
        let neuron_count = weights.len() / dim;
        let mut tables = vec![HashMap::new(); family.num_tables()];
        for (j, row) in weights.chunks_exact(dim).enumerate() {
            let buckets = family.hash_dense(row)?;
            for (table, bucket) in tables.iter_mut().zip(buckets) {
                table.entry(bucket).or_insert_with(Vec::new).push(j as u32);
            }
        }
        Ok(LshIndex {
            config,
            family,
            tables,
            owner_shard: owner,
            neuron_count,
            generation,
        })
    }

    /// Assembles an index from explicit table contents; for tests and
    /// tools that need hand-built tables.
    pub fn from_tables(
        config: LshConfig,
        family: HashFamily,
        tables: Vec<HashMap<u32, Vec<u32>>>,
        owner_shard: usize,
        neuron_count: usize,
    ) -> Self {
        LshIndex {
            config,
            family: Arc::new(family),
            tables,
            owner_shard,
            neuron_count,
            generation: 0,
        }
    }

    pub fn config(&self) -> &LshConfig {
        &self.config
    }

    pub fn family(&self) -> &HashFamily {
        &self.family
    }

    pub fn owner_shard(&self) -> usize {
        self.owner_shard
    }

    pub fn neuron_count(&self) -> usize {
        self.neuron_count
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn table(&self, t: usize) -> &HashMap<u32, Vec<u32>> {
        &self.tables[t]
    }

    pub fn bucket(&self, table: usize, bucket: u32) -> &[u32] {
        self.tables[table].get(&bucket).map_or(&[], |v| v.as_slice())
    }

    /// Buckets the query falls into, one per table.
    pub fn query_buckets<F: Real>(&self, query: &SparseVector<F>) -> Result<Vec<u32>> {
        self.family.hash_sparse(query)
    }

    /// Union of the matching buckets in table order, first occurrence kept.
    /// `seen` is caller-owned scratch of at least `neuron_count` slots that
    /// must contain no value equal to `stamp`.
    pub(crate) fn candidates_into(
        &self,
        buckets: &[u32],
        seen: &mut [u32],
        stamp: u32,
        out: &mut Vec<u32>,
    ) {
        for (t, &b) in buckets.iter().enumerate() {
            for &id in self.bucket(t, b) {
                let slot = &mut seen[id as usize];
                if *slot != stamp {
                    *slot = stamp;
                    out.push(id);
                }
            }
        }
    }

    /// Table contents as bytes: `SMPL`, `u32` table count, then per table a
    /// `u32` bucket count and, in ascending bucket order, `[u32 bucket][u32
    /// len][u32 ids; len]`. The order inside each bucket is kept.
    pub fn encode_tables(&self) -> Vec<u8> {
        let mut out = b"SMPL".to_vec();
        let put = |v: u32, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
        put(self.tables.len() as u32, &mut out);
        for table in &self.tables {
            put(table.len() as u32, &mut out);
            let mut keys: Vec<&u32> = table.keys().collect();
            keys.sort_unstable();
            for k in keys {
                let ids = &table[k];
                put(*k, &mut out);
                put(ids.len() as u32, &mut out);
                ids.iter().for_each(|&id| put(id, &mut out));
            }
        }
        out
    }

    /// Inverse of [`LshIndex::encode_tables`]; the hash family is
    /// regenerated from `config`.
    pub fn decode_tables(
        config: &LshConfig,
        dim: usize,
        owner: usize,
        neuron_count: usize,
        generation: u64,
        bytes: &[u8],
    ) -> Result<LshIndex> {
        let bad = |d: &str| Error::checkpoint(format!("hash tables: {d}"));
        let mut pos = 0usize;
        let mut next = || -> Result<u32> {
            let b = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated"))?;
            pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        if bytes.get(..4) != Some(b"SMPL".as_slice()) {
            return Err(bad("bad magic"));
        }
        next()?;
        let family = HashFamily::generate(config, dim)?;
        let num_tables = next()? as usize;
        if num_tables != family.num_tables() {
            return Err(bad("table count differs from the configuration"));
        }
        let mut tables = Vec::with_capacity(num_tables);
        for _ in 0..num_tables {
            let buckets = next()? as usize;
            let mut table = HashMap::with_capacity(buckets);
            let mut members = 0usize;
            for _ in 0..buckets {
                let key = next()?;
                let len = next()? as usize;
                let ids = (0..len).map(|_| next()).collect::<Result<Vec<u32>>>()?;
                if ids.iter().any(|&id| id as usize >= neuron_count) {
                    return Err(bad("neuron id out of range"));
                }
                members += len;
                table.insert(key, ids);
            }
            if members != neuron_count {
                return Err(bad("table does not hold every neuron once"));
            }
            tables.push(table);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(LshIndex {
            config: config.clone(),
            family: Arc::new(family),
            tables,
            owner_shard: owner,
            neuron_count,
            generation,
        })
    }

    pub fn stats(&self) -> IndexStats {
        let bits = self.config.bucket_bits();
        let code_space = 2f64.powi(bits as i32);
        let tables = self
            .tables
            .iter()
            .enumerate()
            .map(|(t, table)| {
                let mut histogram = BTreeMap::new();
                let mut max_bucket = 0;
                let mut mass = 0;
                for ids in table.values() {
                    *histogram.entry(ids.len()).or_insert(0usize) += 1;
                    max_bucket = max_bucket.max(ids.len());
                    mass += ids.len();
                }
                TableStats {
                    table: t,
                    nonempty_buckets: table.len(),
                    occupancy_histogram: histogram,
                    max_bucket_size: max_bucket,
                    empty_bucket_fraction: 1.0 - table.len() as f64 / code_space,
                    neurons: mass,
                }
            })
            .collect();
        IndexStats {
            owner_shard: self.owner_shard,
            neuron_count: self.neuron_count,
            bucket_bits: bits,
            generation: self.generation,
            tables,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    pub table: usize,
    pub nonempty_buckets: usize,
    /// bucket size -> number of buckets of that size
    pub occupancy_histogram: BTreeMap<usize, usize>,
    pub max_bucket_size: usize,
    /// Fraction of the `2^bucket_bits` code space with no neuron.
    pub empty_bucket_fraction: f64,
    /// Total ids stored in the table.
    pub neurons: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub owner_shard: usize,
    pub neuron_count: usize,
    pub bucket_bits: u32,
    pub generation: u64,
    pub tables: Vec<TableStats>,
}
