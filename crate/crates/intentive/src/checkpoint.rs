//! Self-describing checkpoint container: a JSON header (configs,
//! tokenizer, run manifest, tensor directory) followed by a raw
//! little-endian f64 payload. Round-trips bit-exactly: save -> load ->
//! save produces identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderWeights, LayerWeights, TokenizerSpec};
use crate::error::{Error, Result};
use crate::introspect::{make_reduction, IntentModel, IntrospectorSpec, ZeroProjection};
use crate::numcore::Tensor;
use crate::pruning::PruneTarget;

const MAGIC: &[u8; 8] = b"ITCKPT01";
const FORMAT_VERSION: u32 = 1;

/// One structure-pruning event, as recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub after_phase: usize,
    pub teacher: PruneTarget,
    pub target: PruneTarget,
    /// Indices into the original phase-1 stack that survive.
    pub retained_layers: Vec<usize>,
    pub l_early: usize,
    pub l_late: usize,
}

/// One drawback-extrapolation event: which instructions looked
/// challenging and how many pairs were appended to the train set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementEvent {
    pub after_phase: usize,
    pub challenging_instruction_ids: Vec<String>,
    pub added_pairs: usize,
}

/// Source of truth for a run's phase/pruning/refinement history.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub phases_completed: usize,
    /// Training-set size at the start of each completed phase.
    pub train_sizes: Vec<usize>,
    pub prune_events: Vec<PruneEvent>,
    pub refinement_events: Vec<RefinementEvent>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, counted in f64 values.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    encoder_config: EncoderConfig,
    introspector_spec: IntrospectorSpec,
    tokenizer: TokenizerSpec,
    manifest: RunManifest,
    tensors: Vec<TensorEntry>,
}

fn directory(model: &IntentModel) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (name, t) in model.base_query.named_tensors() {
        out.push((format!("base_query.{name}"), t));
    }
    for (name, t) in model.base_doc.named_tensors() {
        out.push((format!("base_doc.{name}"), t));
    }
    for (i, layer) in model.introspector.iter().enumerate() {
        for (name, t) in layer.named_fields() {
            out.push((format!("introspector.{i}.{name}"), t));
        }
    }
    out.push(("zp1.weight".to_string(), &model.zp1.weight));
    out.push(("zp1.bias".to_string(), &model.zp1.bias));
    out.push(("zp2.weight".to_string(), &model.zp2.weight));
    out.push(("zp2.bias".to_string(), &model.zp2.bias));
    if let Some(r) = &model.reduction {
        out.push(("reduction".to_string(), r));
    }
    out
}

pub fn save_model(path: &Path, model: &IntentModel, manifest: &RunManifest) -> Result<()> {
    model.validate()?;
    let dir = directory(model);
    let mut entries = Vec::with_capacity(dir.len());
    let mut offset = 0;
    for (name, t) in &dir {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        encoder_config: model.base_query.config,
        introspector_spec: model.spec.clone(),
        tokenizer: model.tokenizer.clone(),
        manifest: manifest.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&(offset as u64).to_le_bytes())?;
    let mut payload = Vec::with_capacity(offset * 8);
    for (_, t) in &dir {
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

fn take_tensor(
    map: &mut BTreeMap<String, Tensor>,
    name: &str,
) -> Result<Tensor> {
    map.remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
}

fn take_layer(map: &mut BTreeMap<String, Tensor>, prefix: &str) -> Result<LayerWeights> {
    Ok(LayerWeights {
        wq: take_tensor(map, &format!("{prefix}.wq"))?,
        bq: take_tensor(map, &format!("{prefix}.bq"))?,
        wk: take_tensor(map, &format!("{prefix}.wk"))?,
        bk: take_tensor(map, &format!("{prefix}.bk"))?,
        wv: take_tensor(map, &format!("{prefix}.wv"))?,
        bv: take_tensor(map, &format!("{prefix}.bv"))?,
        wo: take_tensor(map, &format!("{prefix}.wo"))?,
        bo: take_tensor(map, &format!("{prefix}.bo"))?,
        ln1_gain: take_tensor(map, &format!("{prefix}.ln1_gain"))?,
        ln1_bias: take_tensor(map, &format!("{prefix}.ln1_bias"))?,
        w1: take_tensor(map, &format!("{prefix}.w1"))?,
        b1: take_tensor(map, &format!("{prefix}.b1"))?,
        w2: take_tensor(map, &format!("{prefix}.w2"))?,
        b2: take_tensor(map, &format!("{prefix}.b2"))?,
        ln2_gain: take_tensor(map, &format!("{prefix}.ln2_gain"))?,
        ln2_bias: take_tensor(map, &format!("{prefix}.ln2_bias"))?,
    })
}

fn take_encoder(
    map: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    config: EncoderConfig,
) -> Result<EncoderWeights> {
    let mut layers = Vec::with_capacity(config.num_layers);
    for i in 0..config.num_layers {
        layers.push(take_layer(map, &format!("{prefix}.layer.{i}"))?);
    }
    Ok(EncoderWeights {
        config,
        token_emb: take_tensor(map, &format!("{prefix}.token_emb"))?,
        pos_emb: take_tensor(map, &format!("{prefix}.pos_emb"))?,
        layers,
    })
}

pub fn load_model(path: &Path) -> Result<(IntentModel, RunManifest)> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    file.read_exact(&mut len8)?;
    let payload_len = u64::from_le_bytes(len8) as usize;
    let mut payload = vec![0u8; payload_len * 8];
    file.read_exact(&mut payload)?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            rest.len()
        )));
    }

    let mut map = BTreeMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        if n != entry.len || entry.offset + entry.len > payload_len {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} directory entry inconsistent with payload",
                entry.name
            )));
        }
        let start = entry.offset * 8;
        let data: Vec<f64> = payload[start..start + entry.len * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        if map
            .insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate tensor {:?}", entry.name)));
        }
    }

    let config = header.encoder_config;
    let spec = header.introspector_spec;
    let base_query = take_encoder(&mut map, "base_query", config)?;
    let base_doc = take_encoder(&mut map, "base_doc", config)?;
    let mut introspector = Vec::with_capacity(spec.retained_layers.len());
    for i in 0..spec.retained_layers.len() {
        introspector.push(take_layer(&mut map, &format!("introspector.{i}"))?);
    }
    let zp1 = ZeroProjection {
        weight: take_tensor(&mut map, "zp1.weight")?,
        bias: take_tensor(&mut map, "zp1.bias")?,
    };
    let zp2 = ZeroProjection {
        weight: take_tensor(&mut map, "zp2.weight")?,
        bias: take_tensor(&mut map, "zp2.bias")?,
    };
    let reduction = if spec.hidden_dim != config.hidden_dim {
        Some(take_tensor(&mut map, "reduction")?)
    } else {
        None
    };
    if let Some(name) = map.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name:?}")));
    }

    let model = IntentModel {
        tokenizer: header.tokenizer,
        base_query,
        base_doc,
        introspector,
        zp1,
        zp2,
        reduction,
        spec,
    };
    model.validate()?;
    if let Some(r) = &model.reduction {
        let expected = make_reduction(config.hidden_dim, model.spec.hidden_dim)?;
        if *r != expected {
            return Err(Error::Checkpoint(
                "reduction matrix does not match its deterministic construction".into(),
            ));
        }
    }
    Ok((model, header.manifest))
}
