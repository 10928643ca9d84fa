use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LshConfig;
use crate::real::Real;

/// Signed random projections with sparse ternary planes.
///
/// Planes are stored coordinate-major: for each key coordinate the list of
/// planes with a non-zero entry there and its sign. Plane `t * K + j` is
/// hash function `j` of table `t`.
#[derive(Debug, Clone)]
pub struct SrpFamily {
    dim: usize,
    hashes_per_table: usize,
    num_tables: usize,
    offsets: Vec<u32>,
    planes: Vec<u32>,
    negative: Vec<bool>,
}

impl SrpFamily {
    /// Entries are +1 and -1 with probability 1/6 each, 0 otherwise.
    pub fn generate(cfg: &LshConfig, dim: usize) -> Self {
        let k = cfg.hashes_per_table as usize;
        let l = cfg.num_tables as usize;
        let total = k * l;
        let mut rng = ChaCha8Rng::seed_from_u64(super::mix_seed(cfg.seed, 0x5350));
        let mut offsets = Vec::with_capacity(dim + 1);
        let mut planes = Vec::new();
        let mut negative = Vec::new();
        offsets.push(0);
        for _ in 0..dim {
            for p in 0..total {
                let r: u32 = rng.random_range(0..6);
                if r < 2 {
                    planes.push(p as u32);
                    negative.push(r == 1);
                }
            }
            offsets.push(planes.len() as u32);
        }
        SrpFamily {
            dim,
            hashes_per_table: k,
            num_tables: l,
            offsets,
            planes,
            negative,
        }
    }

    /// Builds from explicit planes indexed `[table][function][coordinate]`
    /// with entries in {-1, 0, 1}.
    pub fn from_planes(dim: usize, tables: &[Vec<Vec<i8>>]) -> Self {
        let l = tables.len();
        let k = tables.first().map_or(0, |t| t.len());
        let mut offsets = vec![0u32];
        let mut planes = Vec::new();
        let mut negative = Vec::new();
        for c in 0..dim {
            for (t, table) in tables.iter().enumerate() {
                assert_eq!(table.len(), k, "every table needs the same number of planes");
                for (j, plane) in table.iter().enumerate() {
                    assert_eq!(plane.len(), dim);
                    match plane[c] {
                        0 => {}
                        s => {
                            planes.push((t * k + j) as u32);
                            negative.push(s < 0);
                        }
                    }
                }
            }
            offsets.push(planes.len() as u32);
        }
        SrpFamily {
            dim,
            hashes_per_table: k,
            num_tables: l,
            offsets,
            planes,
            negative,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_tables(&self) -> usize {
        self.num_tables
    }

    pub fn hashes_per_table(&self) -> usize {
        self.hashes_per_table
    }

    /// Projections of a key onto every plane.
    pub fn projections<F: Real>(&self, key: impl Iterator<Item = (u32, F)>) -> Vec<f64> {
        let mut dots = vec![0.0f64; self.hashes_per_table * self.num_tables];
        for (c, v) in key {
            let v = v.as_f64();
            if v == 0.0 {
                continue;
            }
            let (lo, hi) = (self.offsets[c as usize] as usize, self.offsets[c as usize + 1] as usize);
            for e in lo..hi {
                let p = self.planes[e] as usize;
                if self.negative[e] {
                    dots[p] -= v;
                } else {
                    dots[p] += v;
                }
            }
        }
        dots
    }

    /// Bucket ids for all tables; bit `j` (most significant first) is set
    /// iff the projection onto plane `j` is strictly positive.
    pub fn hash_all<F: Real>(&self, key: impl Iterator<Item = (u32, F)>) -> Vec<u32> {
        let dots = self.projections(key);
        dots.chunks(self.hashes_per_table.max(1))
            .take(self.num_tables)
            .map(|chunk| chunk.iter().fold(0u32, |b, &d| (b << 1) | (d > 0.0) as u32))
            .collect()
    }

    pub fn hash<F: Real>(&self, table: usize, key: &crate::sparse::SparseVector<F>) -> crate::Result<u32> {
        if key.dim != self.dim || table >= self.num_tables {
            return Err(crate::Error::input(format!(
                "srp_hash: key dim {} (family {}) table {table} of {}",
                key.dim, self.dim, self.num_tables
            )));
        }
        Ok(self.hash_all(key.iter())[table])
    }
}
