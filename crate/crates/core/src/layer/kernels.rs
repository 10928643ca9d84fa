use std::sync::atomic::{AtomicU32, Ordering};

use rayon::prelude::*;

use super::{GradAccumulator, LayerSnapshot, NeuronShard, SampleActivations};
use crate::error::{Error, Result};
use crate::real::{axpy, dense_dot, gemm, MatRef, Real};
use crate::sparse::{sparse_dot_unchecked, SparseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardActivation {
    Relu,
    /// Raw pre-activations, softmax is applied after the gather.
    Identity,
}

fn check_args<F: Real>(
    shard: &NeuronShard<F>,
    inputs: &[SparseVector<F>],
    active_local: &[Vec<u32>],
) -> Result<()> {
    if inputs.len() != active_local.len() {
        return Err(Error::input(format!(
            "{} inputs but {} active lists",
            inputs.len(),
            active_local.len()
        )));
    }
    for (s, (x, act)) in inputs.iter().zip(active_local).enumerate() {
        if x.dim != shard.in_dim {
            return Err(Error::input(format!(
                "sample {s}: input dimension {} does not match layer input {}",
                x.dim, shard.in_dim
            )));
        }
        if let Some(&bad) = act.iter().find(|&&j| j as usize >= shard.local_count) {
            return Err(Error::input(format!(
                "sample {s}: active id {bad} outside shard {} of {} neurons",
                shard.shard_id, shard.local_count
            )));
        }
    }
    Ok(())
}

/// Every neuron active and every input coordinate stored: the batch can go
/// through dense matrix products.
fn dense_batch<F: Real>(
    shard: &NeuronShard<F>,
    inputs: &[SparseVector<F>],
    active_local: &[Vec<u32>],
) -> bool {
    !inputs.is_empty()
        && shard.local_count > 0
        && inputs.iter().all(|x| x.is_full())
        && active_local.iter().all(|a| a.len() == shard.local_count)
}

#[inline]
fn pre_activation<F: Real>(shard: &NeuronShard<F>, x: &SparseVector<F>, j: usize) -> F {
    let row = shard.row(j);
    let dot = if x.is_full() {
        dense_dot(&x.values, row)
    } else {
        sparse_dot_unchecked(&x.indices, &x.values, row)
    };
    dot + shard.biases[j]
}

#[inline]
fn activate<F: Real>(z: F, act: ForwardActivation) -> F {
    match act {
        ForwardActivation::Relu => z.max(F::zero()),
        ForwardActivation::Identity => z,
    }
}

fn forward_sample<F: Real>(
    shard: &NeuronShard<F>,
    x: &SparseVector<F>,
    active: &[u32],
    act: ForwardActivation,
) -> SampleActivations<F> {
    let values = active
        .iter()
        .map(|&j| activate(pre_activation(shard, x, j as usize), act))
        .collect();
    let ids = active
        .iter()
        .map(|&j| (shard.global_offset + j as usize) as u32)
        .collect();
    SampleActivations::new(ids, values)
}

fn forward_dense<F: Real>(
    shard: &NeuronShard<F>,
    inputs: &[SparseVector<F>],
    act: ForwardActivation,
) -> Vec<SampleActivations<F>> {
    let (b, n, d) = (inputs.len(), shard.local_count, shard.in_dim);
    let x: Vec<F> = inputs.iter().flat_map(|v| v.values.iter().copied()).collect();
    let mut z = vec![F::zero(); b * n];
    gemm(
        F::one(),
        MatRef::new(&x, b, d),
        MatRef::t(&shard.weights, n, d),
        F::zero(),
        &mut z,
    );
    let ids: Vec<u32> = shard.global_range().map(|g| g as u32).collect();
    z.chunks_exact(n)
        .map(|row| {
            let vals = row
                .iter()
                .zip(&shard.biases)
                .map(|(&v, &bias)| activate(v + bias, act))
                .collect();
            SampleActivations::new(ids.clone(), vals)
        })
        .collect()
}

/// Computes this shard's active neurons for every sample of the batch.
/// `active_local` holds sorted local ids; the returned snapshot carries
/// global ids and zeroed errors.
pub fn forward_shard<F: Real>(
    shard: &NeuronShard<F>,
    width: usize,
    inputs: &[SparseVector<F>],
    active_local: &[Vec<u32>],
    act: ForwardActivation,
) -> Result<LayerSnapshot<F>> {
    check_args(shard, inputs, active_local)?;
    let samples = if dense_batch(shard, inputs, active_local) {
        forward_dense(shard, inputs, act)
    } else {
        inputs
            .iter()
            .zip(active_local)
            .map(|(x, a)| forward_sample(shard, x, a, act))
            .collect()
    };
    Ok(LayerSnapshot::single(width, samples))
}

/// [`forward_shard`] with samples spread over the current rayon pool.
/// Reads are shared, so the result is identical to the sequential version.
pub fn forward_shard_par<F: Real>(
    shard: &NeuronShard<F>,
    width: usize,
    inputs: &[SparseVector<F>],
    active_local: &[Vec<u32>],
    act: ForwardActivation,
) -> Result<LayerSnapshot<F>> {
    check_args(shard, inputs, active_local)?;
    let samples = if dense_batch(shard, inputs, active_local) {
        forward_dense(shard, inputs, act)
    } else {
        inputs
            .par_iter()
            .zip(active_local.par_iter())
            .map(|(x, a)| forward_sample(shard, x, a, act))
            .collect()
    };
    Ok(LayerSnapshot::single(width, samples))
}

/// Softmax over each sample's active output neurons.
pub fn compute_output_distribution<F: Real>(gathered: &LayerSnapshot<F>) -> Result<Vec<Vec<F>>> {
    gathered
        .samples
        .iter()
        .enumerate()
        .map(|(s, sample)| {
            if sample.is_empty() {
                return Err(Error::Invariant(format!(
                    "sample {s} has no active output neuron"
                )));
            }
            let max = sample
                .activations
                .iter()
                .copied()
                .fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = sample.activations.iter().map(|&z| (z - max).exp()).collect();
            let total: F = exps.iter().copied().sum();
            Ok(exps.into_iter().map(|e| e / total).collect())
        })
        .collect()
}

/// Cross-entropy gradient `p - y` with `y = 1/|labels|` on the true labels.
/// Returns per-sample errors aligned with the snapshot's active ids and the
/// summed loss of the batch. Samples without labels get zero error.
pub fn output_error<F: Real>(
    gathered: &LayerSnapshot<F>,
    probabilities: &[Vec<F>],
    labels: &[&[u32]],
) -> Result<(Vec<Vec<F>>, f64)> {
    if probabilities.len() != gathered.samples.len() || labels.len() != gathered.samples.len() {
        return Err(Error::Invariant("output_error: batch sizes disagree".into()));
    }
    let mut loss = 0.0;
    let mut errors = Vec::with_capacity(labels.len());
    for (s, ((sample, p), ls)) in gathered.samples.iter().zip(probabilities).zip(labels).enumerate() {
        if ls.is_empty() {
            errors.push(vec![F::zero(); sample.len()]);
            continue;
        }
        let mut e = p.clone();
        let y = 1.0 / ls.len() as f64;
        for &l in ls.iter() {
            let pos = sample.position(l).ok_or_else(|| {
                Error::Invariant(format!("sample {s}: label {l} missing from active output set"))
            })?;
            e[pos] = e[pos] - F::of_f64(y);
            loss -= y * p[pos].as_f64().max(f64::MIN_POSITIVE).ln();
        }
        errors.push(e);
    }
    Ok((errors, loss))
}

/// Zeroes errors of entries whose activation is not positive (RELU
/// derivative, 0 at exactly 0).
pub fn apply_relu_mask<F: Real>(snapshot: &LayerSnapshot<F>, errors: &mut [Vec<F>]) {
    for (sample, e) in snapshot.samples.iter().zip(errors.iter_mut()) {
        for (err, &a) in e.iter_mut().zip(&sample.activations) {
            if a <= F::zero() {
                *err = F::zero();
            }
        }
    }
}

fn check_errors<F: Real>(active_local: &[Vec<u32>], errors: &[Vec<F>]) -> Result<()> {
    if active_local.len() != errors.len()
        || active_local.iter().zip(errors).any(|(a, e)| a.len() != e.len())
    {
        return Err(Error::input("errors not aligned with active neurons"));
    }
    Ok(())
}

/// Accumulates weight and bias gradients of this shard's active neurons and,
/// when `input_errors` is set, returns each sample's partial error with
/// respect to its input, aligned with the input's stored coordinates.
/// Partial errors of all shards sum to the full input error.
pub fn backward_shard<F: Real>(
    shard: &NeuronShard<F>,
    inputs: &[SparseVector<F>],
    active_local: &[Vec<u32>],
    errors: &[Vec<F>],
    grads: &mut GradAccumulator<F>,
    input_errors: bool,
) -> Result<Vec<Vec<F>>> {
    check_args(shard, inputs, active_local)?;
    check_errors(active_local, errors)?;
    if dense_batch(shard, inputs, active_local) {
        return Ok(backward_dense(shard, inputs, errors, grads, input_errors));
    }
    let d = shard.in_dim;
    let mut out = Vec::with_capacity(if input_errors { inputs.len() } else { 0 });
    for ((x, active), err) in inputs.iter().zip(active_local).zip(errors) {
        let full = x.is_full();
        let mut partial = vec![F::zero(); if input_errors { x.nnz() } else { 0 }];
        for (&j, &e) in active.iter().zip(err) {
            let j = j as usize;
            grads.touch_row(j as u32);
            grads.grad_b[j] += e;
            let base = j * d;
            if full {
                grads.touch_full_row(j as u32);
                axpy(e, &x.values, &mut grads.grad_w[base..base + d]);
            } else {
                for (&i, &v) in x.indices.iter().zip(&x.values) {
                    let c = base + i as usize;
                    grads.touch_cell(c as u32);
                    grads.grad_w[c] += e * v;
                }
            }
            if input_errors && e != F::zero() {
                let row = shard.row(j);
                if full {
                    axpy(e, row, &mut partial);
                } else {
                    for (p, &i) in partial.iter_mut().zip(&x.indices) {
                        *p += e * row[i as usize];
                    }
                }
            }
        }
        if input_errors {
            out.push(partial);
        }
    }
    Ok(out)
}

fn backward_dense<F: Real>(
    shard: &NeuronShard<F>,
    inputs: &[SparseVector<F>],
    errors: &[Vec<F>],
    grads: &mut GradAccumulator<F>,
    input_errors: bool,
) -> Vec<Vec<F>> {
    let (b, n, d) = (inputs.len(), shard.local_count, shard.in_dim);
    let x: Vec<F> = inputs.iter().flat_map(|v| v.values.iter().copied()).collect();
    let e: Vec<F> = errors.iter().flat_map(|v| v.iter().copied()).collect();
    gemm(
        F::one(),
        MatRef::t(&e, b, n),
        MatRef::new(&x, b, d),
        F::one(),
        &mut grads.grad_w,
    );
    for row in e.chunks_exact(n) {
        for (g, &v) in grads.grad_b.iter_mut().zip(row) {
            *g += v;
        }
    }
    grads.mark_all();
    if !input_errors {
        return Vec::new();
    }
    let mut p = vec![F::zero(); b * d];
    gemm(
        F::one(),
        MatRef::new(&e, b, n),
        MatRef::new(&shard.weights, n, d),
        F::zero(),
        &mut p,
    );
    p.chunks_exact(d).map(|r| r.to_vec()).collect()
}

fn atomic_u32(v: &mut [u32]) -> &[AtomicU32] {
    // SAFETY: AtomicU32 has the size and alignment of u32, and the unique
    // borrow guarantees no non-atomic access for the returned lifetime.
    unsafe { &*(v as *mut [u32] as *const [AtomicU32]) }
}

fn atomic_f32(v: &mut [f32]) -> &[AtomicU32] {
    // SAFETY: as above; f32 and u32 share size and alignment.
    unsafe { &*(v as *mut [f32] as *const [AtomicU32]) }
}

#[inline]
fn racy_add(cell: &AtomicU32, v: f32) {
    let old = f32::from_bits(cell.load(Ordering::Relaxed));
    cell.store((old + v).to_bits(), Ordering::Relaxed);
}

/// Newly stamped entries reported by one worker.
#[derive(Default)]
struct Touched {
    rows: Vec<u32>,
    cells: Vec<u32>,
}

/// [`backward_shard`] with samples processed concurrently and gradients
/// added to the shared buffers without synchronization. Concurrent adds to
/// the same weight may lose an update. The touched set is exact.
pub fn backward_shard_hogwild(
    shard: &NeuronShard<f32>,
    inputs: &[SparseVector<f32>],
    active_local: &[Vec<u32>],
    errors: &[Vec<f32>],
    grads: &mut GradAccumulator<f32>,
    input_errors: bool,
) -> Result<Vec<Vec<f32>>> {
    check_args(shard, inputs, active_local)?;
    check_errors(active_local, errors)?;
    let d = shard.in_dim;
    let generation = grads.generation();
    let gw = atomic_f32(&mut grads.grad_w);
    let gb = atomic_f32(&mut grads.grad_b);
    let row_stamp = atomic_u32(&mut grads.row_stamp);
    let full_stamp = atomic_u32(&mut grads.row_full_stamp);
    let cell_stamp = atomic_u32(&mut grads.cell_stamp);

    let results: Vec<(Vec<f32>, Touched)> = (0..inputs.len())
        .into_par_iter()
        .map(|s| {
            let (x, active, err) = (&inputs[s], &active_local[s], &errors[s]);
            let full = x.is_full();
            let mut touched = Touched::default();
            let mut partial = vec![0.0f32; if input_errors { x.nnz() } else { 0 }];
            for (&j, &e) in active.iter().zip(err) {
                let j = j as usize;
                if row_stamp[j].swap(generation, Ordering::Relaxed) != generation {
                    touched.rows.push(j as u32);
                }
                racy_add(&gb[j], e);
                let base = j * d;
                if full {
                    full_stamp[j].store(generation, Ordering::Relaxed);
                    for (c, &v) in gw[base..base + d].iter().zip(&x.values) {
                        racy_add(c, e * v);
                    }
                } else {
                    for (&i, &v) in x.indices.iter().zip(&x.values) {
                        let c = base + i as usize;
                        if cell_stamp[c].swap(generation, Ordering::Relaxed) != generation {
                            touched.cells.push(c as u32);
                        }
                        racy_add(&gw[c], e * v);
                    }
                }
                if input_errors && e != 0.0 {
                    let row = shard.row(j);
                    if full {
                        axpy(e, row, &mut partial);
                    } else {
                        for (p, &i) in partial.iter_mut().zip(&x.indices) {
                            *p += e * row[i as usize];
                        }
                    }
                }
            }
            (partial, touched)
        })
        .collect();

    let mut out = Vec::with_capacity(results.len());
    for (partial, touched) in results {
        grads.touched_rows.extend(touched.rows);
        grads.touched_cells.extend(touched.cells);
        if input_errors {
            out.push(partial);
        }
    }
    Ok(out)
}
