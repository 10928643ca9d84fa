use std::any::{Any, TypeId};
use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{validate_run, NetworkSpec, Parallelism, ShardPlan, TrainMode, TrainingConfig};
use crate::comm::{snapshot_sync, Endpoint, PayloadKind, Phase, SnapshotLayout, ValueField};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::{
    adam_step, apply_relu_mask, backward_shard, backward_shard_hogwild, compute_output_distribution,
    forward_shard, forward_shard_par, output_error, ForwardActivation, GradAccumulator, LayerSnapshot,
    LayerSpec, NeuronShard, SampleActivations,
};
use crate::lsh::{build_index, mix_seed, rebuild, LshIndex, SelectionPolicy, Selector};
use crate::real::Real;
use crate::sparse::{DataRecord, SparseVector};

/// Per-batch record written to the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub epoch: usize,
    /// Global batch counter, starting at 0.
    pub batch: u64,
    pub samples: usize,
    /// Mean cross-entropy over the batch's samples.
    pub loss: f64,
    /// Logical payload bytes of this batch by phase.
    pub bytes: BTreeMap<Phase, u64>,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub collective_calls: u64,
    /// Mean gathered active neurons per sample, per layer.
    pub active_per_sample: Vec<f64>,
    pub rebuilt: bool,
    /// Hash of every gathered snapshot of the batch; equal on all nodes.
    pub snapshot_digest: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub batches: usize,
    pub samples: usize,
    pub mean_loss: f64,
    pub bytes: BTreeMap<Phase, u64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub precision_at_1: f64,
    pub precision_at_5: f64,
}

/// This node's active neurons (global ids) for one batch, per layer and
/// sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSelections {
    pub batch: u64,
    pub layers: Vec<Vec<Vec<u32>>>,
    /// Per layer and sample, each shard's entry count in the gathered
    /// snapshot.
    pub shard_counts: Vec<Vec<Vec<u32>>>,
}

struct NodeLayer<F: Real> {
    spec: LayerSpec,
    shard: NeuronShard<F>,
    grads: GradAccumulator<F>,
    index: Option<LshIndex>,
    selector: Selector,
    rebuilds: u64,
}

/// One node's share of the model and its training state.
pub struct NodeTrainer<F: Real = f32> {
    net: NetworkSpec,
    cfg: TrainingConfig,
    plan: ShardPlan,
    rank: usize,
    layers: Vec<NodeLayer<F>>,
    batches_done: u64,
    epochs_done: usize,
    record: bool,
    recorded: Vec<BatchSelections>,
    pool: Option<rayon::ThreadPool>,
}

fn layer_seed(net_seed: u64, k: usize) -> u64 {
    mix_seed(mix_seed(net_seed, 0x1a7e), k as u64)
}

/// Seed of layer `k`'s hash functions after `regens` regenerations. Equal on
/// every node, so all shards of a layer share one family.
fn family_seed(net: &NetworkSpec, k: usize, regens: u64) -> u64 {
    let base = net.layers[k].lsh.as_ref().map_or(0, |l| l.seed);
    mix_seed(mix_seed(mix_seed(net.seed, base), k as u64), regens)
}

impl<F: Real> NodeTrainer<F> {
    /// Fresh weights and hash tables for node `rank` of `nodes`.
    pub fn new(net: NetworkSpec, cfg: TrainingConfig, rank: usize, nodes: usize) -> Result<Self> {
        let plan = validate_run(&net, &cfg, nodes)?;
        let shards = net
            .layer_specs()
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                NeuronShard::init_uniform(rank, plan.layers[k][rank].clone(), spec.in_dim, layer_seed(net.seed, k))
            })
            .collect();
        Self::with_shards(net, cfg, plan, rank, shards, 0, 0)
    }

    pub(crate) fn with_shards(
        net: NetworkSpec,
        cfg: TrainingConfig,
        plan: ShardPlan,
        rank: usize,
        shards: Vec<NeuronShard<F>>,
        batches_done: u64,
        epochs_done: usize,
    ) -> Result<Self> {
        if rank >= plan.nodes {
            return Err(Error::config(format!("node id {rank} outside cluster of {}", plan.nodes)));
        }
        if cfg.parallelism == Parallelism::Hogwild && TypeId::of::<F>() != TypeId::of::<f32>() {
            return Err(Error::config("hogwild parallelism requires f32 weights"));
        }
        let pool = if cfg.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::config(format!("training.threads: {e}")))?,
            )
        } else {
            None
        };
        let rebuilds = batches_done / cfg.rebuild_period;
        let mut layers = Vec::with_capacity(shards.len());
        for (k, (spec, shard)) in net.layer_specs().into_iter().zip(shards).enumerate() {
            let index = if cfg.mode == TrainMode::Sparse && !spec.is_dense() {
                let lsh = net.layers[k]
                    .lsh_config()
                    .with_seed(family_seed(&net, k, rebuilds / cfg.regenerate_every));
                let mut idx = build_index(&shard.weights, spec.in_dim, rank, &lsh)?;
                idx.generation = rebuilds;
                Some(idx)
            } else {
                None
            };
            layers.push(NodeLayer {
                spec,
                grads: GradAccumulator::for_shard(&shard)?,
                shard,
                index,
                selector: Selector::new(),
                rebuilds,
            });
        }
        Ok(NodeTrainer {
            net,
            cfg,
            plan,
            rank,
            layers,
            batches_done,
            epochs_done,
            record: false,
            recorded: Vec::new(),
            pool,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn network(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &ShardPlan {
        &self.plan
    }

    pub fn batches_done(&self) -> u64 {
        self.batches_done
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn shard(&self, layer: usize) -> &NeuronShard<F> {
        &self.layers[layer].shard
    }

    pub fn index(&self, layer: usize) -> Option<&LshIndex> {
        self.layers[layer].index.as_ref()
    }

    pub(crate) fn set_index(&mut self, layer: usize, index: LshIndex) {
        self.layers[layer].index = Some(index);
    }

    /// Keep every batch's active-set selections for later replay.
    pub fn record_selections(&mut self, on: bool) {
        self.record = on;
    }

    pub fn take_selections(&mut self) -> Vec<BatchSelections> {
        std::mem::take(&mut self.recorded)
    }

    fn layout(&self) -> SnapshotLayout {
        match self.cfg.mode {
            TrainMode::Sparse => SnapshotLayout::Sparse,
            TrainMode::DenseBaseline => SnapshotLayout::Dense,
        }
    }

    fn all_active(&self, k: usize, batch: usize) -> Vec<Vec<u32>> {
        let all: Vec<u32> = (0..self.layers[k].shard.local_count as u32).collect();
        vec![all; batch]
    }

    fn select(&mut self, k: usize, queries: &[SparseVector<F>], labels: Option<&[&[u32]]>) -> Result<Vec<Vec<u32>>> {
        let nodes = self.plan.nodes;
        let is_dense = self.cfg.mode == TrainMode::DenseBaseline || self.layers[k].spec.is_dense();
        if is_dense {
            return Ok(self.all_active(k, queries.len()));
        }
        let layer = &mut self.layers[k];
        let index = layer.index.as_ref().expect("sparse layers carry an index");
        let policy = SelectionPolicy::new(layer.spec.shard_budget(nodes), self.net.layers[k].fill, 0)?;
        let range = layer.shard.global_range();
        let base = mix_seed(mix_seed(mix_seed(self.net.seed, 0x5e1ec7), self.batches_done), k as u64);
        let base = mix_seed(base, self.rank as u64);
        let mut forced = Vec::new();
        let mut out = Vec::with_capacity(queries.len());
        for (s, q) in queries.iter().enumerate() {
            forced.clear();
            if let Some(ls) = labels {
                forced.extend(
                    ls[s]
                        .iter()
                        .filter(|&&l| range.contains(&(l as usize)))
                        .map(|&l| (l as usize - range.start) as u32),
                );
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(base, s as u64));
            out.push(layer.selector.select(index, q, &policy, &forced, &mut rng)?);
        }
        Ok(out)
    }

    fn forward(
        &self,
        k: usize,
        inputs: &[SparseVector<F>],
        active: &[Vec<u32>],
        act: ForwardActivation,
    ) -> Result<LayerSnapshot<F>> {
        let shard = &self.layers[k].shard;
        let width = self.layers[k].spec.out_dim;
        match &self.pool {
            Some(pool) => pool.install(|| forward_shard_par(shard, width, inputs, active, act)),
            None => forward_shard(shard, width, inputs, active, act),
        }
    }

    fn backward(
        &mut self,
        k: usize,
        inputs: &Vec<SparseVector<F>>,
        active: &[Vec<u32>],
        errors: &Vec<Vec<F>>,
        input_errors: bool,
    ) -> Result<Vec<Vec<F>>> {
        let NodeLayer { shard, grads, .. } = &mut self.layers[k];
        if self.cfg.parallelism == Parallelism::Hogwild {
            let mut run = move || hogwild(shard, inputs, active, errors, grads, input_errors);
            let out = match &self.pool {
                Some(pool) => pool.install(run),
                None => run(),
            };
            return out.expect("hogwild mode is rejected for non-f32 trainers");
        }
        backward_shard(shard, inputs, active, errors, grads, input_errors)
    }

    /// Runs one batch: select, forward and gather per layer, output errors
    /// and their sync, backward with reduction of input errors, then the
    /// optimizer step and any scheduled hash-table rebuild.
    pub fn train_batch(&mut self, ep: &mut Endpoint, records: &[&DataRecord]) -> Result<BatchMetrics> {
        self.check_endpoint(ep)?;
        let start = Instant::now();
        let before = ep.stats();
        let b = records.len();
        let nl = self.layers.len();
        let labels: Vec<&[u32]> = records.iter().map(|r| r.labels.as_slice()).collect();
        let mut x0: Vec<SparseVector<F>> = records.iter().map(|r| r.features.cast()).collect();
        if let Some(bad) = x0.iter().position(|x| x.dim != self.net.input_dim) {
            return Err(Error::input(format!(
                "sample {bad}: feature dimension {} does not match network input {}",
                x0[bad].dim, self.net.input_dim
            )));
        }
        let layout = self.layout();

        let mut inputs: Vec<Vec<SparseVector<F>>> = Vec::with_capacity(nl);
        let mut actives: Vec<Vec<Vec<u32>>> = Vec::with_capacity(nl);
        let mut gathered: Vec<LayerSnapshot<F>> = Vec::with_capacity(nl);
        for k in 0..nl {
            let input = if k == 0 {
                std::mem::take(&mut x0)
            } else {
                gathered[k - 1].input_vectors()
            };
            let is_out = k + 1 == nl;
            let forced = (is_out && self.cfg.label_forcing).then_some(&labels[..]);
            let active = self.select(k, &input, forced)?;
            let act = if is_out { ForwardActivation::Identity } else { ForwardActivation::Relu };
            let local = self.forward(k, &input, &active, act)?;
            let g = snapshot_sync(ep, Phase::ForwardGather, &local, ValueField::Activations, layout, &self.plan.layers[k])?;
            inputs.push(input);
            actives.push(active);
            gathered.push(g);
        }

        let out = gathered.last_mut().expect("at least one layer");
        let probs = compute_output_distribution(out)?;
        let (errors, loss_sum) = output_error(out, &probs, &labels)?;
        if !loss_sum.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {} batch {}",
                self.epochs_done, self.batches_done
            )));
        }
        self.sync_output_errors(ep, nl - 1, &mut gathered, errors)?;

        for k in (0..nl).rev() {
            let own: Vec<Vec<F>> = (0..b)
                .map(|s| gathered[k].samples[s].errors[own_segment(&gathered[k], s, self.rank)].to_vec())
                .collect();
            let partial = self.backward(k, &inputs[k], &actives[k], &own, k > 0)?;
            if k > 0 {
                let flat: Vec<F> = partial.concat();
                let summed = ep.all_reduce_sum(Phase::GradReduce, &flat, PayloadKind::InputErrors)?;
                let prev = &mut gathered[k - 1];
                let mut off = 0;
                let mut errs: Vec<Vec<F>> = prev
                    .samples
                    .iter()
                    .map(|s| {
                        let e = summed[off..off + s.len()].to_vec();
                        off += s.len();
                        e
                    })
                    .collect();
                if off != summed.len() {
                    return Err(Error::Invariant("reduced input errors do not match the gathered layer".into()));
                }
                apply_relu_mask(prev, &mut errs);
                for (sample, e) in prev.samples.iter_mut().zip(errs) {
                    sample.errors = e;
                }
            }
        }

        for (k, layer) in self.layers.iter_mut().enumerate() {
            adam_step(&mut layer.shard, &mut layer.grads, &self.cfg.optimizer).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "layer {k}, epoch {} batch {}: {m}",
                    self.epochs_done, self.batches_done
                )),
                other => other,
            })?;
        }

        if self.record {
            let layers = actives
                .iter()
                .zip(&self.layers)
                .map(|(a, l)| {
                    let off = l.shard.global_offset as u32;
                    a.iter().map(|ids| ids.iter().map(|&i| i + off).collect()).collect()
                })
                .collect();
            self.recorded.push(BatchSelections {
                batch: self.batches_done,
                layers,
                shard_counts: gathered.iter().map(|g| g.shard_counts.clone()).collect(),
            });
        }

        let batch = self.batches_done;
        self.batches_done += 1;
        let rebuilt = self.maybe_rebuild()?;

        let delta = ep.stats().since(&before);
        Ok(BatchMetrics {
            epoch: self.epochs_done,
            batch,
            samples: b,
            loss: if b == 0 { 0.0 } else { loss_sum / b as f64 },
            bytes: delta.phases.iter().filter(|(_, s)| s.payload_bytes > 0).map(|(p, s)| (*p, s.payload_bytes)).collect(),
            bytes_sent: delta.bytes_sent,
            bytes_received: delta.bytes_received,
            collective_calls: delta.collective_calls,
            active_per_sample: gathered
                .iter()
                .map(|g| if b == 0 { 0.0 } else { g.total_active() as f64 / b as f64 })
                .collect(),
            rebuilt,
            snapshot_digest: digest(&gathered),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Each shard publishes the errors of its own output entries; the
    /// gathered result replaces the errors of the output snapshot.
    fn sync_output_errors(
        &self,
        ep: &mut Endpoint,
        k: usize,
        gathered: &mut [LayerSnapshot<F>],
        errors: Vec<Vec<F>>,
    ) -> Result<()> {
        let out = &mut gathered[k];
        let samples = out
            .samples
            .iter()
            .zip(&errors)
            .enumerate()
            .map(|(s, (sample, e))| {
                let r = own_segment(out, s, self.rank);
                SampleActivations {
                    ids: sample.ids[r.clone()].to_vec(),
                    activations: sample.activations[r.clone()].to_vec(),
                    errors: e[r].to_vec(),
                }
            })
            .collect();
        let local = LayerSnapshot::single(out.width, samples);
        let synced = snapshot_sync(ep, Phase::ErrorSync, &local, ValueField::Errors, self.layout(), &self.plan.layers[k])?;
        for (s, (sample, got)) in out.samples.iter_mut().zip(synced.samples).enumerate() {
            if sample.ids != got.ids {
                return Err(Error::Invariant(format!(
                    "sample {s}: synced output errors cover different neurons than the forward gather"
                )));
            }
            sample.errors = got.errors;
        }
        Ok(())
    }

    fn maybe_rebuild(&mut self) -> Result<bool> {
        if self.batches_done % self.cfg.rebuild_period != 0 {
            return Ok(false);
        }
        let mut any = false;
        for (k, layer) in self.layers.iter_mut().enumerate() {
            layer.rebuilds += 1;
            let Some(index) = &layer.index else { continue };
            let regen = layer.rebuilds % self.cfg.regenerate_every == 0;
            let seed = regen.then(|| family_seed(&self.net, k, layer.rebuilds / self.cfg.regenerate_every));
            layer.index = Some(rebuild(index, &layer.shard.weights, seed)?);
            any = true;
        }
        Ok(any)
    }

    fn check_endpoint(&self, ep: &Endpoint) -> Result<()> {
        if ep.rank() != self.rank || ep.size() != self.plan.nodes {
            return Err(Error::config(format!(
                "trainer is node {} of {} but the endpoint is rank {} of {}",
                self.rank,
                self.plan.nodes,
                ep.rank(),
                ep.size()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let h = &data.header;
        if h.feature_dim != self.net.input_dim {
            return Err(Error::config(format!(
                "dataset feature_dim {} does not match network.input_dim {}",
                h.feature_dim, self.net.input_dim
            )));
        }
        if h.label_dim != self.net.output_dim() {
            return Err(Error::config(format!(
                "dataset label_dim {} does not match the output layer width {}",
                h.label_dim,
                self.net.output_dim()
            )));
        }
        Ok(())
    }

    /// One pass over `data` in the epoch's batch order.
    pub fn train_epoch(
        &mut self,
        ep: &mut Endpoint,
        data: &Dataset,
        mut on_batch: impl FnMut(&BatchMetrics) -> Result<()>,
    ) -> Result<EpochSummary> {
        self.check_dataset(data)?;
        let start = Instant::now();
        let before = ep.stats();
        let epoch = self.epochs_done;
        let order = data.batch_order(self.cfg.batch_size, self.cfg.shuffle_seed.map(|s| mix_seed(s, epoch as u64)));
        let (mut loss, mut samples) = (0.0, 0);
        for ids in &order {
            let records: Vec<&DataRecord> = ids.iter().map(|&i| &data.records[i]).collect();
            let m = self.train_batch(ep, &records)?;
            loss += m.loss * m.samples as f64;
            samples += m.samples;
            on_batch(&m)?;
        }
        self.epochs_done += 1;
        let delta = ep.stats().since(&before);
        Ok(EpochSummary {
            epoch,
            batches: order.len(),
            samples,
            mean_loss: if samples == 0 { 0.0 } else { loss / samples as f64 },
            bytes: delta.phases.iter().filter(|(_, s)| s.payload_bytes > 0).map(|(p, s)| (*p, s.payload_bytes)).collect(),
            wall_secs: start.elapsed().as_secs_f64(),
        })
    }

    /// Dense inference over `data` in file order; every node returns the
    /// same report.
    pub fn evaluate(&mut self, ep: &mut Endpoint, data: &Dataset) -> Result<EvalReport> {
        self.check_endpoint(ep)?;
        self.check_dataset(data)?;
        let nl = self.layers.len();
        let (mut hits1, mut hits5) = (0.0, 0.0);
        for ids in data.batch_order(self.cfg.batch_size, None) {
            let records: Vec<&DataRecord> = ids.iter().map(|&i| &data.records[i]).collect();
            let mut input: Vec<SparseVector<F>> = records.iter().map(|r| r.features.cast()).collect();
            let mut logits = None;
            for k in 0..nl {
                let active = self.all_active(k, input.len());
                let act = if k + 1 == nl { ForwardActivation::Identity } else { ForwardActivation::Relu };
                let local = self.forward(k, &input, &active, act)?;
                let g = snapshot_sync(ep, Phase::Eval, &local, ValueField::Activations, SnapshotLayout::Dense, &self.plan.layers[k])?;
                if k + 1 == nl {
                    logits = Some(g);
                } else {
                    input = g.input_vectors();
                }
            }
            let logits = logits.expect("at least one layer");
            for (sample, r) in logits.samples.iter().zip(&records) {
                let top = top_k(&sample.activations, 5);
                let is_label = |c: &usize| r.labels.binary_search(&(*c as u32)).is_ok();
                if top.first().is_some_and(is_label) {
                    hits1 += 1.0;
                }
                hits5 += top.iter().filter(|c| is_label(c)).count() as f64 / 5.0;
            }
        }
        let n = data.len();
        let frac = |h: f64| if n == 0 { 0.0 } else { h / n as f64 };
        Ok(EvalReport {
            samples: n,
            precision_at_1: frac(hits1),
            precision_at_5: frac(hits5),
        })
    }
}

fn hogwild<F: Real>(
    shard: &NeuronShard<F>,
    inputs: &Vec<SparseVector<F>>,
    active: &[Vec<u32>],
    errors: &Vec<Vec<F>>,
    grads: &mut GradAccumulator<F>,
    input_errors: bool,
) -> Option<Result<Vec<Vec<F>>>> {
    let shard = (shard as &dyn Any).downcast_ref::<NeuronShard<f32>>()?;
    let inputs = (inputs as &dyn Any).downcast_ref::<Vec<SparseVector<f32>>>()?;
    let errors = (errors as &dyn Any).downcast_ref::<Vec<Vec<f32>>>()?;
    let grads = (grads as &mut dyn Any).downcast_mut::<GradAccumulator<f32>>()?;
    let out: Box<dyn Any> = Box::new(backward_shard_hogwild(shard, inputs, active, errors, grads, input_errors));
    out.downcast::<Result<Vec<Vec<F>>>>().ok().map(|b| *b)
}

/// Positions of `rank`'s entries inside a gathered sample.
fn own_segment<F: Real>(snap: &LayerSnapshot<F>, sample: usize, rank: usize) -> Range<usize> {
    let counts = &snap.shard_counts[sample];
    let start: usize = counts[..rank].iter().map(|&c| c as usize).sum();
    start..start + counts[rank] as usize
}

/// Indices of the `k` largest values, ties broken by lower index.
pub(crate) fn top_k<F: Real>(values: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        values[*b]
            .partial_cmp(&values[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// FNV-1a over 64-bit words of ids and value bits.
fn digest<F: Real>(snaps: &[LayerSnapshot<F>]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |w: u64| h = (h ^ w).wrapping_mul(PRIME);
    for snap in snaps {
        for s in &snap.samples {
            eat(s.ids.len() as u64);
            s.ids.iter().for_each(|&id| eat(id as u64));
            for v in s.activations.iter().chain(&s.errors) {
                eat(v.as_f64().to_bits());
            }
        }
    }
    h
}
