use serde::{Deserialize, Serialize};

use super::NeuronShard;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
}

mod defaults {
    pub fn lr() -> f64 {
        1e-4
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn epsilon() -> f64 {
        1e-8
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: defaults::lr(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            epsilon: defaults::epsilon(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Gradient buffers for one shard plus the set of weights touched during
/// the current batch.
///
/// A weight `(j, i)` is touched when neuron `j` was active for a sample
/// whose input stores coordinate `i`; a bias is touched whenever its neuron
/// was active. Only touched entries are stepped by [`adam_step`].
#[derive(Debug, Clone)]
pub struct GradAccumulator<F> {
    in_dim: usize,
    rows: usize,
    pub(crate) grad_w: Vec<F>,
    pub(crate) grad_b: Vec<F>,
    generation: u32,
    pub(crate) row_stamp: Vec<u32>,
    pub(crate) row_full_stamp: Vec<u32>,
    pub(crate) cell_stamp: Vec<u32>,
    pub(crate) touched_rows: Vec<u32>,
    pub(crate) touched_cells: Vec<u32>,
    all: bool,
}

impl<F: Real> GradAccumulator<F> {
    pub fn new(rows: usize, in_dim: usize) -> Result<Self> {
        let cells = rows
            .checked_mul(in_dim)
            .filter(|&c| c <= u32::MAX as usize)
            .ok_or_else(|| Error::config("shard too large for 32-bit cell addressing"))?;
        Ok(GradAccumulator {
            in_dim,
            rows,
            grad_w: vec![F::zero(); cells],
            grad_b: vec![F::zero(); rows],
            generation: 1,
            row_stamp: vec![0; rows],
            row_full_stamp: vec![0; rows],
            cell_stamp: vec![0; cells],
            touched_rows: Vec::new(),
            touched_cells: Vec::new(),
            all: false,
        })
    }

    pub fn for_shard(shard: &NeuronShard<F>) -> Result<Self> {
        Self::new(shard.local_count, shard.in_dim)
    }

    pub(crate) fn generation(&self) -> u32 {
        self.generation
    }

    pub fn grad_w(&self) -> &[F] {
        &self.grad_w
    }

    pub fn grad_b(&self) -> &[F] {
        &self.grad_b
    }

    pub fn mark_all(&mut self) {
        self.all = true;
    }

    #[inline]
    pub(crate) fn touch_row(&mut self, row: u32) {
        let s = &mut self.row_stamp[row as usize];
        if *s != self.generation {
            *s = self.generation;
            self.touched_rows.push(row);
        }
    }

    #[inline]
    pub(crate) fn touch_full_row(&mut self, row: u32) {
        self.row_full_stamp[row as usize] = self.generation;
    }

    #[inline]
    pub(crate) fn touch_cell(&mut self, cell: u32) {
        let s = &mut self.cell_stamp[cell as usize];
        if *s != self.generation {
            *s = self.generation;
            self.touched_cells.push(cell);
        }
    }

    /// Number of weights (not biases) that the next step will update.
    pub fn touched_weight_count(&self) -> usize {
        if self.all {
            return self.grad_w.len();
        }
        let full = self
            .touched_rows
            .iter()
            .filter(|&&r| self.row_full_stamp[r as usize] == self.generation)
            .count();
        let partial = self
            .touched_cells
            .iter()
            .filter(|&&c| self.row_full_stamp[c as usize / self.in_dim] != self.generation)
            .count();
        full * self.in_dim + partial
    }

    /// Visits every touched weight cell exactly once, then every touched
    /// bias row.
    fn visit(&self, mut cell: impl FnMut(usize), mut bias: impl FnMut(usize)) {
        if self.all {
            (0..self.grad_w.len()).for_each(&mut cell);
            (0..self.rows).for_each(&mut bias);
            return;
        }
        let g = self.generation;
        for &r in &self.touched_rows {
            if self.row_full_stamp[r as usize] == g {
                let start = r as usize * self.in_dim;
                (start..start + self.in_dim).for_each(&mut cell);
            }
        }
        for &c in &self.touched_cells {
            if self.row_full_stamp[c as usize / self.in_dim] != g {
                cell(c as usize);
            }
        }
        for &r in &self.touched_rows {
            bias(r as usize);
        }
    }

    fn finish_batch(&mut self) {
        self.touched_rows.clear();
        self.touched_cells.clear();
        self.all = false;
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.row_stamp.iter_mut().for_each(|s| *s = 0);
            self.row_full_stamp.iter_mut().for_each(|s| *s = 0);
            self.cell_stamp.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
    }
}

/// One Adam step over the weights touched this batch, then clears the
/// buffers. Moments of untouched weights do not decay; bias correction uses
/// the shard's global step count.
pub fn adam_step<F: Real>(
    shard: &mut NeuronShard<F>,
    grads: &mut GradAccumulator<F>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.rows != shard.local_count || grads.in_dim != shard.in_dim {
        return Err(Error::Invariant("gradient buffer does not match shard shape".into()));
    }
    let (cells, rows) = if grads.all {
        (Vec::new(), Vec::new())
    } else {
        let mut cells = Vec::new();
        let mut rows = Vec::new();
        grads.visit(|c| cells.push(c), |r| rows.push(r));
        (cells, rows)
    };
    let bad_cell = if grads.all {
        grads.grad_w.iter().position(|g| !g.is_finite())
    } else {
        cells.iter().copied().find(|&c| !grads.grad_w[c].is_finite())
    };
    let bad_row = if grads.all {
        grads.grad_b.iter().position(|g| !g.is_finite())
    } else {
        rows.iter().copied().find(|&r| !grads.grad_b[r].is_finite())
    };
    let bad = bad_cell
        .map(|c| (c / shard.in_dim, format!("weight input {}", c % shard.in_dim)))
        .or(bad_row.map(|r| (r, "bias".to_string())));
    if let Some((row, what)) = bad {
        return Err(Error::Numeric(format!(
            "non-finite gradient at shard {} neuron {} {what}",
            shard.shard_id,
            shard.global_offset + row
        )));
    }

    let t = shard.step + 1;
    let b1 = F::of_f64(cfg.beta1);
    let b2 = F::of_f64(cfg.beta2);
    let one_b1 = F::of_f64(1.0 - cfg.beta1);
    let one_b2 = F::of_f64(1.0 - cfg.beta2);
    let bc1 = F::of_f64(1.0 - cfg.beta1.powf(t as f64));
    let bc2 = F::of_f64(1.0 - cfg.beta2.powf(t as f64));
    let lr = F::of_f64(cfg.lr);
    let eps = F::of_f64(cfg.epsilon);
    let update = |w: &mut F, m: &mut F, v: &mut F, g: F| {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
    };

    let NeuronShard {
        weights,
        biases,
        m_w,
        v_w,
        m_b,
        v_b,
        ..
    } = shard;
    let GradAccumulator {
        all,
        grad_w,
        grad_b,
        ..
    } = grads;
    if *all {
        for c in 0..grad_w.len() {
            update(&mut weights[c], &mut m_w[c], &mut v_w[c], grad_w[c]);
            grad_w[c] = F::zero();
        }
        for r in 0..grad_b.len() {
            update(&mut biases[r], &mut m_b[r], &mut v_b[r], grad_b[r]);
            grad_b[r] = F::zero();
        }
    } else {
        for c in cells {
            update(&mut weights[c], &mut m_w[c], &mut v_w[c], grad_w[c]);
            grad_w[c] = F::zero();
        }
        for r in rows {
            update(&mut biases[r], &mut m_b[r], &mut v_b[r], grad_b[r]);
            grad_b[r] = F::zero();
        }
    }
    shard.step = t;
    grads.finish_batch();
    Ok(())
}
