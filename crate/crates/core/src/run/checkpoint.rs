//! Checkpoints are a directory holding `manifest.json` and `params.bin`.
//! The payload is every parameter in store order, flattened row-major, as
//! little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::label_decoder::{GraphMode, LabelGraph};
use crate::metrics::Thresholds;

use super::config::RunConfig;
use super::model::{HotVae, ModelSpec};
use super::train::{INIT_STREAM, NOISE_STREAM, SHUFFLE_STREAM};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";
const FORMAT: &str = "hotvae-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngDescriptor {
    pub algorithm: String,
    pub seed: u64,
    pub init_stream: u64,
    pub shuffle_stream: u64,
    pub noise_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub config: RunConfig,
    pub spec: ModelSpec,
    pub graph_mode: GraphMode,
    pub graph_edges: Vec<(usize, usize)>,
    pub rng: RngDescriptor,
    pub standardizer: Option<Standardizer>,
    pub thresholds: Option<Thresholds>,
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
    pub params: Vec<ParamEntry>,
    pub payload_len: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: HotVae,
}

/// Everything besides the model that goes into a manifest.
#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub standardizer: Option<Standardizer>,
    pub thresholds: Option<Thresholds>,
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
}

fn edges(g: &LabelGraph) -> Vec<(usize, usize)> {
    let l = g.labels();
    (0..l)
        .flat_map(|i| (i + 1..l).map(move |j| (i, j)))
        .filter(|&(i, j)| g.has_edge(i, j))
        .collect()
}

pub fn manifest_for(model: &HotVae, cfg: &RunConfig, meta: CheckpointMeta) -> Manifest {
    let mut offset = 0;
    let params = model
        .store
        .iter()
        .map(|p| {
            let e = ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.len();
            e
        })
        .collect();
    Manifest {
        format: FORMAT.into(),
        version: VERSION,
        epoch: meta.epoch,
        config: cfg.clone(),
        spec: model.spec.clone(),
        graph_mode: model.graph.mode(),
        graph_edges: edges(&model.graph),
        rng: RngDescriptor {
            algorithm: "ChaCha8".into(),
            seed: cfg.seed_or_default(),
            init_stream: INIT_STREAM,
            shuffle_stream: SHUFFLE_STREAM,
            noise_stream: NOISE_STREAM,
        },
        standardizer: meta.standardizer,
        thresholds: meta.thresholds,
        feature_names: meta.feature_names,
        label_names: meta.label_names,
        params,
        payload_len: offset,
    }
}

pub fn save(dir: &Path, model: &HotVae, cfg: &RunConfig, meta: CheckpointMeta) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let manifest = manifest_for(model, cfg, meta);
    let flat = model.store.to_flat();
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(PAYLOAD_FILE), bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let graph = LabelGraph::from_edges(manifest.spec.labels, &manifest.graph_edges, manifest.graph_mode)?;
    let mut model = HotVae::new(manifest.spec.clone(), graph, manifest.rng.seed)?;
    if model.store.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, architecture has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    let mut offset = 0;
    for (p, e) in model.store.iter().zip(&manifest.params) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() || e.offset != offset {
            return Err(Error::Checkpoint(format!("parameter {} does not match the manifest", e.name)));
        }
        offset += p.value.len();
    }
    let bytes = fs::read(dir.join(PAYLOAD_FILE))?;
    if bytes.len() != manifest.payload_len * 8 || offset != manifest.payload_len {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            bytes.len(),
            manifest.payload_len * 8
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    model.store.load_flat(&flat)?;
    Ok(Checkpoint { manifest, model })
}
