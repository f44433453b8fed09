//! Self-describing checkpoint container.
//!
//! Layout: one JSON header line (configs, metadata, tensor directory with
//! byte offsets), then raw little-endian f64 parameter blocks. Round trips
//! are bit-exact. LoRA adapters ship in the same file, tagged with the
//! hash of the base weights they were trained against.

use crate::error::{Error, Result};
use crate::lora::{LayerAdapters, LoraAdapters, LoraConfig};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Tensor;
use crate::tokenizer::TokenizerSpec;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    FullFt,
    Peft,
}

/// Training-run metadata carried inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunMeta {
    pub mode: TrainMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoraHeader {
    config: LoraConfig,
    base_hash: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    payload: String,
    model: ModelConfig,
    tokenizer: TokenizerSpec,
    train: Option<TrainRunMeta>,
    base_hash: String,
    tensors: Vec<TensorEntry>,
    lora: Option<LoraHeader>,
}

/// A trained model state: base weights, optional adapters, and the
/// metadata needed to use it without external context.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub tokenizer: TokenizerSpec,
    pub weights: ModelWeights,
    pub lora: Option<LoraAdapters>,
    pub train_meta: Option<TrainRunMeta>,
}

impl Checkpoint {
    pub fn new(
        model_config: ModelConfig,
        tokenizer: TokenizerSpec,
        weights: ModelWeights,
        lora: Option<LoraAdapters>,
        train_meta: Option<TrainRunMeta>,
    ) -> Self {
        Checkpoint {
            model_config,
            tokenizer,
            weights,
            lora,
            train_meta,
        }
    }

    pub fn base_hash(&self) -> String {
        self.weights.content_hash()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = BufWriter::new(file);

        let mut offset = 0u64;
        let mut entries = Vec::new();
        let mut blobs: Vec<Vec<u8>> = Vec::new();
        for (name, tensor) in self.weights.named_tensors() {
            let bytes = tensor.to_le_bytes();
            entries.push(TensorEntry {
                name,
                rows: tensor.rows(),
                cols: tensor.cols(),
                offset,
            });
            offset += bytes.len() as u64;
            blobs.push(bytes);
        }
        let lora_header = self.lora.as_ref().map(|adapters| {
            let mut tensors = Vec::new();
            for (name, tensor) in adapters.named_tensors() {
                let bytes = tensor.to_le_bytes();
                tensors.push(TensorEntry {
                    name,
                    rows: tensor.rows(),
                    cols: tensor.cols(),
                    offset,
                });
                offset += bytes.len() as u64;
                blobs.push(bytes);
            }
            LoraHeader {
                config: adapters.config,
                base_hash: self.base_hash(),
                tensors,
            }
        });

        let header = Header {
            format: "enercast-checkpoint".to_string(),
            version: FORMAT_VERSION,
            payload: "tsfm".to_string(),
            model: self.model_config.clone(),
            tokenizer: self.tokenizer.clone(),
            train: self.train_meta.clone(),
            base_hash: self.base_hash(),
            tensors: entries,
            lora: lora_header,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for blob in blobs {
            out.write_all(&blob)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = std::fs::File::open(path)?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        let newline = raw
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".to_string()))?;
        let header: Header = serde_json::from_slice(&raw[..newline])?;
        if header.format != "enercast-checkpoint" {
            return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (reader supports {FORMAT_VERSION})",
                header.version
            )));
        }
        let body = &raw[newline + 1..];
        let read_tensor = |entry: &TensorEntry| -> Result<Tensor> {
            let start = entry.offset as usize;
            let len = entry.rows * entry.cols * 8;
            let slice = body.get(start..start + len).ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{}` out of file bounds", entry.name))
            })?;
            Tensor::from_le_bytes(entry.rows, entry.cols, slice)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` malformed", entry.name)))
        };

        let mut named = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            named.push((entry.name.clone(), read_tensor(entry)?));
        }
        let weights = weights_from_named(&header.model, named)?;
        let computed = weights.content_hash();
        if computed != header.base_hash {
            return Err(Error::Checkpoint(
                "base weight hash mismatch; file corrupted".to_string(),
            ));
        }
        let lora = match &header.lora {
            None => None,
            Some(lh) => {
                if lh.base_hash != computed {
                    return Err(Error::Checkpoint(
                        "adapters were trained against a different base model".to_string(),
                    ));
                }
                let mut named = Vec::with_capacity(lh.tensors.len());
                for entry in &lh.tensors {
                    named.push((entry.name.clone(), read_tensor(entry)?));
                }
                Some(adapters_from_named(&header.model, lh.config, named)?)
            }
        };
        Ok(Checkpoint {
            model_config: header.model,
            tokenizer: header.tokenizer,
            weights,
            lora,
            train_meta: header.train,
        })
    }
}

fn take(
    named: &mut std::collections::BTreeMap<String, Tensor>,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<Tensor> {
    let t = named
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    if (t.rows(), t.cols()) != (rows, cols) {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {}x{}, expected {rows}x{cols}",
            t.rows(),
            t.cols()
        )));
    }
    Ok(t)
}

fn weights_from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<ModelWeights> {
    let mut map: std::collections::BTreeMap<String, Tensor> = named.into_iter().collect();
    let d = cfg.d_model;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(crate::model::LayerWeights {
            ln1_gain: take(&mut map, &format!("layer{i}.ln1_gain"), 1, d)?,
            ln1_offset: take(&mut map, &format!("layer{i}.ln1_offset"), 1, d)?,
            wq: take(&mut map, &format!("layer{i}.wq"), d, d)?,
            wk: take(&mut map, &format!("layer{i}.wk"), d, d)?,
            wv: take(&mut map, &format!("layer{i}.wv"), d, d)?,
            wo: take(&mut map, &format!("layer{i}.wo"), d, d)?,
            ln2_gain: take(&mut map, &format!("layer{i}.ln2_gain"), 1, d)?,
            ln2_offset: take(&mut map, &format!("layer{i}.ln2_offset"), 1, d)?,
            w_ff1: take(&mut map, &format!("layer{i}.w_ff1"), d, cfg.d_ff)?,
            w_ff2: take(&mut map, &format!("layer{i}.w_ff2"), cfg.d_ff, d)?,
        });
    }
    let weights = ModelWeights {
        token_embedding: take(&mut map, "token_embedding", cfg.vocab, d)?,
        position_embedding: take(&mut map, "position_embedding", cfg.max_context, d)?,
        layers,
        final_ln_gain: take(&mut map, "final_ln_gain", 1, d)?,
        final_ln_offset: take(&mut map, "final_ln_offset", 1, d)?,
        w_out: take(&mut map, "w_out", d, cfg.vocab)?,
    };
    if let Some((name, _)) = map.into_iter().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
    }
    Ok(weights)
}

fn adapters_from_named(
    cfg: &ModelConfig,
    lora_cfg: LoraConfig,
    named: Vec<(String, Tensor)>,
) -> Result<LoraAdapters> {
    let mut map: std::collections::BTreeMap<String, Tensor> = named.into_iter().collect();
    let d = cfg.d_model;
    let r = lora_cfg.rank;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(LayerAdapters {
            q_left: take(&mut map, &format!("layer{i}.lora_q_left"), d, r)?,
            q_right: take(&mut map, &format!("layer{i}.lora_q_right"), r, d)?,
            v_left: take(&mut map, &format!("layer{i}.lora_v_left"), d, r)?,
            v_right: take(&mut map, &format!("layer{i}.lora_v_right"), r, d)?,
        });
    }
    if let Some((name, _)) = map.into_iter().next() {
        return Err(Error::Checkpoint(format!("unexpected adapter tensor `{name}`")));
    }
    Ok(LoraAdapters {
        config: lora_cfg,
        layers,
    })
}
