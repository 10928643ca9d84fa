//! Checkpoint directories: one binary file per (layer, node) plus a JSON
//! manifest written by node 0.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::trainer::NodeTrainer;
use super::{validate_run, NetworkSpec, TrainingConfig};
use crate::comm::Endpoint;
use crate::error::{Error, Result};
use crate::layer::checkpoint::{read_shard, write_shard, ShardHeader};
use crate::layer::{LayerSpec, NeuronShard};
use crate::lsh::LshIndex;
use crate::real::Real;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestShard {
    pub node: usize,
    pub offset: usize,
    pub count: usize,
    pub file: String,
    /// Serialized hash tables, for layers that use them.
    #[serde(default)]
    pub tables: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub spec: LayerSpec,
    pub shards: Vec<ManifestShard>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub nodes: usize,
    pub network: NetworkSpec,
    pub epochs_done: usize,
    pub batches_done: u64,
    pub layers: Vec<ManifestLayer>,
}

fn shard_file(layer: usize, node: usize) -> String {
    format!("layer{layer}_node{node}.bin")
}

fn tables_file(layer: usize, node: usize) -> String {
    format!("layer{layer}_node{node}.lsh")
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::checkpoint(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

impl<F: Real> NodeTrainer<F> {
    /// Writes this node's shards to `dir`; node 0 then writes the manifest
    /// once every node has finished. Collective: all nodes must call it.
    pub fn save_checkpoint(&self, ep: &mut Endpoint, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for k in 0..self.num_layers() {
            let shard: NeuronShard<f32> = self.shard(k).cast();
            let header = ShardHeader {
                layer_index: k as u32,
                spec: self.network().layer_specs()[k],
                shard_id: self.rank() as u32,
                offset: shard.global_offset as u64,
                count: shard.local_count as u64,
                step: shard.step,
                hash_seed: self.index(k).map_or(0, |i| i.config().seed),
                hash_generation: self.index(k).map_or(0, |i| i.generation),
            };
            write_shard(&dir.join(shard_file(k, self.rank())), &header, &shard)?;
            if let Some(idx) = self.index(k) {
                let path = dir.join(tables_file(k, self.rank()));
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, idx.encode_tables())?;
                fs::rename(&tmp, &path)?;
            }
        }
        ep.barrier()?;
        if self.rank() == 0 {
            let manifest = Manifest {
                version: MANIFEST_VERSION,
                nodes: self.plan().nodes,
                network: self.network().clone(),
                epochs_done: self.epochs_done(),
                batches_done: self.batches_done(),
                layers: self
                    .network()
                    .layer_specs()
                    .into_iter()
                    .zip(&self.plan().layers)
                    .enumerate()
                    .map(|(k, (spec, ranges))| ManifestLayer {
                        spec,
                        shards: ranges
                            .iter()
                            .enumerate()
                            .map(|(node, r)| ManifestShard {
                                node,
                                offset: r.start,
                                count: r.len(),
                                file: shard_file(k, node),
                                tables: self.index(k).map(|_| tables_file(k, node)),
                            })
                            .collect(),
                    })
                    .collect(),
            };
            let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
            fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
            fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        }
        ep.barrier()
    }

    /// Restores node `rank` from a checkpoint written under the same
    /// network and cluster size, including the hash tables as they were.
    pub fn load_checkpoint(dir: &Path, net: NetworkSpec, cfg: TrainingConfig, rank: usize) -> Result<Self> {
        let m = load_manifest(dir)?;
        if m.network != net {
            return Err(Error::checkpoint("checkpoint network does not match the configured network"));
        }
        let plan = validate_run(&net, &cfg, m.nodes)?;
        if rank >= m.nodes {
            return Err(Error::checkpoint(format!("node {rank} not in a checkpoint of {} nodes", m.nodes)));
        }
        let specs = net.layer_specs();
        if m.layers.len() != specs.len() {
            return Err(Error::checkpoint("checkpoint layer count does not match the network"));
        }
        let mut shards = Vec::with_capacity(specs.len());
        let mut saved_tables = Vec::with_capacity(specs.len());
        for (k, (layer, spec)) in m.layers.iter().zip(&specs).enumerate() {
            let entry = layer
                .shards
                .iter()
                .find(|s| s.node == rank)
                .ok_or_else(|| Error::checkpoint(format!("layer {k}: no shard for node {rank}")))?;
            let path: PathBuf = dir.join(&entry.file);
            let (h, shard) = read_shard(&path)?;
            let range = &plan.layers[k][rank];
            if h.layer_index as usize != k
                || h.spec != *spec
                || h.shard_id as usize != rank
                || h.offset as usize != range.start
                || h.count as usize != range.len()
            {
                return Err(Error::checkpoint(format!(
                    "{}: shard header does not match layer {k} node {rank}",
                    path.display()
                )));
            }
            saved_tables.push((entry.tables.clone(), h.hash_seed, h.hash_generation, shard.local_count));
            shards.push(shard.cast::<F>());
        }
        let mut t = NodeTrainer::with_shards(net, cfg, plan, rank, shards, m.batches_done, m.epochs_done)?;
        for (k, (file, seed, generation, count)) in saved_tables.into_iter().enumerate() {
            let Some(current) = t.index(k) else { continue };
            let file = file.ok_or_else(|| Error::checkpoint(format!("layer {k}: hash tables missing")))?;
            let path = dir.join(&file);
            let bytes = fs::read(&path)
                .map_err(|e| Error::checkpoint(format!("cannot read {}: {e}", path.display())))?;
            let cfg = current.config().with_seed(seed);
            let idx = LshIndex::decode_tables(&cfg, specs[k].in_dim, rank, count, generation, &bytes)
                .map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))?;
            t.set_index(k, idx);
        }
        Ok(t)
    }
}
