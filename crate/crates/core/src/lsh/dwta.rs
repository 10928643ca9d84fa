use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LshConfig;
use crate::error::{Error, Result};
use crate::real::Real;

/// Densified winner-take-all hashing.
///
/// Hash function `f = t * K + j` owns a window of `m` distinct key
/// coordinates and emits the position of the largest non-zero key value in
/// it. Windows with no non-zero coordinate borrow the code of the next
/// function in cyclic order; after `K * L` fruitless probes the sentinel
/// code `m` is emitted.
#[derive(Debug, Clone)]
pub struct DwtaFamily {
    dim: usize,
    hashes_per_table: usize,
    num_tables: usize,
    bin_size: usize,
    code_bits: u32,
    windows: Vec<u32>,
    inv_offsets: Vec<u32>,
    inv_entries: Vec<(u32, u8)>,
}

impl DwtaFamily {
    pub fn generate(cfg: &LshConfig, dim: usize) -> Result<Self> {
        let m = cfg.bin_size as usize;
        if m > dim {
            return Err(Error::config(format!(
                "dwta bin_size {m} exceeds key dimension {dim}"
            )));
        }
        let funcs = (cfg.hashes_per_table * cfg.num_tables) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(super::mix_seed(cfg.seed, 0x4457));
        let mut perm: Vec<u32> = (0..dim as u32).collect();
        let mut windows = Vec::with_capacity(funcs * m);
        'outer: loop {
            perm.shuffle(&mut rng);
            for w in perm.chunks_exact(m) {
                if windows.len() == funcs * m {
                    break 'outer;
                }
                windows.extend_from_slice(w);
            }
            if windows.len() == funcs * m {
                break;
            }
        }
        Ok(Self::assemble(
            dim,
            cfg.hashes_per_table as usize,
            cfg.num_tables as usize,
            m,
            windows,
        ))
    }

    /// Builds from explicit windows, one per hash function in table-major
    /// order, each holding `bin_size` distinct coordinates.
    pub fn from_windows(
        dim: usize,
        hashes_per_table: usize,
        num_tables: usize,
        bin_size: usize,
        windows: &[Vec<u32>],
    ) -> Self {
        assert_eq!(windows.len(), hashes_per_table * num_tables);
        let mut flat = Vec::with_capacity(windows.len() * bin_size);
        for w in windows {
            assert_eq!(w.len(), bin_size);
            flat.extend_from_slice(w);
        }
        Self::assemble(dim, hashes_per_table, num_tables, bin_size, flat)
    }

    fn assemble(
        dim: usize,
        hashes_per_table: usize,
        num_tables: usize,
        bin_size: usize,
        windows: Vec<u32>,
    ) -> Self {
        let mut counts = vec![0u32; dim + 1];
        for &c in &windows {
            counts[c as usize + 1] += 1;
        }
        for i in 0..dim {
            counts[i + 1] += counts[i];
        }
        let inv_offsets = counts.clone();
        let mut fill = counts;
        let mut inv_entries = vec![(0u32, 0u8); windows.len()];
        for (slot, &c) in windows.iter().enumerate() {
            let at = fill[c as usize] as usize;
            inv_entries[at] = ((slot / bin_size) as u32, (slot % bin_size) as u8);
            fill[c as usize] += 1;
        }
        DwtaFamily {
            dim,
            hashes_per_table,
            num_tables,
            bin_size,
            code_bits: 32 - (bin_size as u32).leading_zeros(),
            windows,
            inv_offsets,
            inv_entries,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_tables(&self) -> usize {
        self.num_tables
    }

    pub fn bin_size(&self) -> usize {
        self.bin_size
    }

    pub fn window(&self, func: usize) -> &[u32] {
        &self.windows[func * self.bin_size..(func + 1) * self.bin_size]
    }

    /// The code of every hash function after densification.
    pub fn codes<F: Real>(&self, key: impl Iterator<Item = (u32, F)>) -> Vec<u32> {
        let funcs = self.hashes_per_table * self.num_tables;
        let mut best = vec![F::neg_infinity(); funcs];
        let mut pos = vec![u32::MAX; funcs];
        for (c, v) in key {
            if v == F::zero() {
                continue;
            }
            let (lo, hi) = (
                self.inv_offsets[c as usize] as usize,
                self.inv_offsets[c as usize + 1] as usize,
            );
            for &(f, p) in &self.inv_entries[lo..hi] {
                let f = f as usize;
                let p = p as u32;
                if v > best[f] || (v == best[f] && p < pos[f]) {
                    best[f] = v;
                    pos[f] = p;
                }
            }
        }
        let sentinel = self.bin_size as u32;
        (0..funcs)
            .map(|f| {
                if pos[f] != u32::MAX {
                    return pos[f];
                }
                (1..funcs)
                    .map(|probe| pos[(f + probe) % funcs])
                    .find(|&p| p != u32::MAX)
                    .unwrap_or(sentinel)
            })
            .collect()
    }

    pub fn hash_all<F: Real>(&self, key: impl Iterator<Item = (u32, F)>) -> Vec<u32> {
        let codes = self.codes(key);
        codes
            .chunks(self.hashes_per_table)
            .map(|chunk| chunk.iter().fold(0u32, |b, &c| (b << self.code_bits) | c))
            .collect()
    }

    pub fn hash<F: Real>(&self, table: usize, key: &crate::sparse::SparseVector<F>) -> Result<u32> {
        if key.dim != self.dim || table >= self.num_tables {
            return Err(Error::input(format!(
                "dwta_hash: key dim {} (family {}) table {table} of {}",
                key.dim, self.dim, self.num_tables
            )));
        }
        Ok(self.hash_all(key.iter())[table])
    }

    /// Bucket id assigned to keys with no non-zero coordinate.
    pub fn sentinel_bucket(&self) -> u32 {
        (0..self.hashes_per_table).fold(0u32, |b, _| (b << self.code_bits) | self.bin_size as u32)
    }
}
