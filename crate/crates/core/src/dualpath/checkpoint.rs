//! Checkpoint container: one binary file plus a JSON sidecar.
//!
//! The binary layout is little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "HPTCKPT1"
//! schema     u64
//! text cfg   8 x u64  (n_layers, d_model, n_heads, d_k,
//!                      max_sequence, patch_side, n_visual_prompts, d_joint)
//! image cfg  8 x u64  (same order)
//! image_side u64
//! vocab_size u64
//! n_blobs    u64
//! blob*      name_len u64 | name utf-8 | ndim u64 | dims u64* | data f64*
//! ```
//!
//! Blobs are sorted by name and the loader rejects files that are not, so a
//! model serializes to exactly one byte sequence. Blob names starting with
//! `text.` or `image.` are frozen encoder weights; everything else is a
//! trainable parameter. The sidecar at `<path>.json` carries the run
//! config, ablation, class list, vocabulary, loss log, and shot indices.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::dualpath::model::TrainedModel;
use crate::dualpath::TrainConfig;
use crate::encoder::{EncoderConfig, FrozenImageWeights, FrozenTextWeights, LayerWeights};
use crate::error::{Error, Result};
use crate::hierarchy::Ablation;
use crate::numerics::{ParameterSet, Tensor};

pub const CHECKPOINT_SCHEMA: u64 = 1;

const MAGIC: &[u8; 8] = b"HPTCKPT1";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    schema: u64,
    config: TrainConfig,
    ablation: Ablation,
    classes: Vec<String>,
    vocab: Vocabulary,
    loss_log: Vec<(usize, f64)>,
    shot_indices: Vec<usize>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_config(out: &mut Vec<u8>, cfg: &EncoderConfig) {
    for v in [
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_k,
        cfg.max_sequence,
        cfg.patch_side,
        cfg.n_visual_prompts,
        cfg.d_joint,
    ] {
        push_u64(out, v as u64);
    }
}

/// Write the model to `path` and its sidecar to `path.json`.
pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let mut blobs: BTreeMap<String, &Tensor> = BTreeMap::new();
    for (name, t) in model.text_weights.named() {
        blobs.insert(name, t);
    }
    for (name, t) in model.image_weights.named() {
        blobs.insert(name, t);
    }
    for (name, t) in model.params.iter() {
        blobs.insert(name.clone(), t);
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u64(&mut out, CHECKPOINT_SCHEMA);
    push_config(&mut out, &model.text_weights.config);
    push_config(&mut out, &model.image_weights.config);
    push_u64(&mut out, model.image_weights.image_side() as u64);
    push_u64(&mut out, model.vocab.len() as u64);
    push_u64(&mut out, blobs.len() as u64);
    for (name, t) in &blobs {
        push_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        push_u64(&mut out, t.shape().len() as u64);
        for &d in t.shape() {
            push_u64(&mut out, d as u64);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &out)?;

    let sidecar = Sidecar {
        schema: CHECKPOINT_SCHEMA,
        config: model.config.clone(),
        ablation: model.ablation,
        classes: model.classes.clone(),
        vocab: model.vocab.clone(),
        loss_log: model.loss_log.clone(),
        shot_indices: model.shot_indices.clone(),
    };
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Format(format!("sidecar serialization failed: {e}")))?;
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("value {v} overflows usize")))
    }

    fn config(&mut self) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            n_layers: self.usize()?,
            d_model: self.usize()?,
            n_heads: self.usize()?,
            d_k: self.usize()?,
            max_sequence: self.usize()?,
            patch_side: self.usize()?,
            n_visual_prompts: self.usize()?,
            d_joint: self.usize()?,
        })
    }
}

fn take_blob(blobs: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = blobs
        .remove(name)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing blob {name:?}")))?;
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "blob {name:?} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

fn fill(slot: &mut Tensor, blobs: &mut BTreeMap<String, Tensor>, name: &str) -> Result<()> {
    let shape = slot.shape().to_vec();
    *slot = take_blob(blobs, name, &shape)?;
    Ok(())
}

fn fill_layer(
    layer: &mut LayerWeights,
    blobs: &mut BTreeMap<String, Tensor>,
    prefix: &str,
) -> Result<()> {
    fill(&mut layer.ln1_g, blobs, &format!("{prefix}.ln1.g"))?;
    fill(&mut layer.ln1_b, blobs, &format!("{prefix}.ln1.b"))?;
    fill(&mut layer.wq, blobs, &format!("{prefix}.wq"))?;
    fill(&mut layer.bq, blobs, &format!("{prefix}.bq"))?;
    fill(&mut layer.wk, blobs, &format!("{prefix}.wk"))?;
    fill(&mut layer.bk, blobs, &format!("{prefix}.bk"))?;
    fill(&mut layer.wv, blobs, &format!("{prefix}.wv"))?;
    fill(&mut layer.bv, blobs, &format!("{prefix}.bv"))?;
    fill(&mut layer.wo, blobs, &format!("{prefix}.wo"))?;
    fill(&mut layer.bo, blobs, &format!("{prefix}.bo"))?;
    fill(&mut layer.ln2_g, blobs, &format!("{prefix}.ln2.g"))?;
    fill(&mut layer.ln2_b, blobs, &format!("{prefix}.ln2.b"))?;
    fill(&mut layer.w1, blobs, &format!("{prefix}.w1"))?;
    fill(&mut layer.b1, blobs, &format!("{prefix}.b1"))?;
    fill(&mut layer.w2, blobs, &format!("{prefix}.w2"))?;
    fill(&mut layer.b2, blobs, &format!("{prefix}.b2"))?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let schema = r.u64()?;
    if schema != CHECKPOINT_SCHEMA {
        return Err(Error::Format(format!(
            "checkpoint schema {schema}, this build reads {CHECKPOINT_SCHEMA}"
        )));
    }
    let text_cfg = r.config()?;
    let image_cfg = r.config()?;
    let image_side = r.usize()?;
    let vocab_size = r.usize()?;
    let n_blobs = r.usize()?;

    let mut blobs: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut last_name: Option<String> = None;
    for _ in 0..n_blobs {
        let name_len = r.usize()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("blob name is not utf-8".into()))?
            .to_string();
        if let Some(prev) = &last_name {
            if *prev >= name {
                return Err(Error::Format(format!(
                    "blob {name:?} out of order after {prev:?}"
                )));
            }
        }
        let ndim = r.usize()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.usize()?);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("blob {name:?} is malformed: {e}")))?;
        last_name = Some(name.clone());
        blobs.insert(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - r.pos
        )));
    }

    let sidecar_file = sidecar_path(path);
    let sidecar_text = std::fs::read_to_string(&sidecar_file).map_err(|e| {
        Error::Format(format!("cannot read sidecar {}: {e}", sidecar_file.display()))
    })?;
    let sidecar: Sidecar = serde_json::from_str(&sidecar_text)
        .map_err(|e| Error::Format(format!("sidecar is malformed: {e}")))?;
    if sidecar.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Format(format!(
            "sidecar schema {} does not match checkpoint schema {CHECKPOINT_SCHEMA}",
            sidecar.schema
        )));
    }
    sidecar.vocab.validate()?;
    if sidecar.vocab.len() != vocab_size {
        return Err(Error::Format(format!(
            "sidecar vocabulary has {} tokens, checkpoint header says {vocab_size}",
            sidecar.vocab.len()
        )));
    }

    let mut text_weights = FrozenTextWeights::new(text_cfg, vocab_size, 0)?;
    fill(&mut text_weights.token_embed, &mut blobs, "text.token_embed")?;
    fill(&mut text_weights.pos_embed, &mut blobs, "text.pos_embed")?;
    for l in 0..text_cfg.n_layers {
        let prefix = format!("text.layer{l}");
        fill_layer(&mut text_weights.layers[l], &mut blobs, &prefix)?;
    }
    fill(&mut text_weights.final_ln_g, &mut blobs, "text.final_ln.g")?;
    fill(&mut text_weights.final_ln_b, &mut blobs, "text.final_ln.b")?;
    fill(&mut text_weights.proj, &mut blobs, "text.proj")?;

    let mut image_weights = FrozenImageWeights::new(image_cfg, image_side, 0)?;
    fill(
        &mut image_weights.patch_embed_w,
        &mut blobs,
        "image.patch_embed.w",
    )?;
    fill(
        &mut image_weights.patch_embed_b,
        &mut blobs,
        "image.patch_embed.b",
    )?;
    fill(&mut image_weights.class_token, &mut blobs, "image.class_token")?;
    fill(&mut image_weights.pos_embed, &mut blobs, "image.pos_embed")?;
    for l in 0..image_cfg.n_layers {
        let prefix = format!("image.layer{l}");
        fill_layer(&mut image_weights.layers[l], &mut blobs, &prefix)?;
    }
    fill(&mut image_weights.final_ln_g, &mut blobs, "image.final_ln.g")?;
    fill(&mut image_weights.final_ln_b, &mut blobs, "image.final_ln.b")?;
    fill(&mut image_weights.proj, &mut blobs, "image.proj")?;

    let mut params = ParameterSet::new();
    for (name, t) in blobs {
        if name.starts_with("text.") || name.starts_with("image.") {
            return Err(Error::Format(format!(
                "unexpected frozen-weight blob {name:?}"
            )));
        }
        params.insert(&name, t)?;
    }

    Ok(TrainedModel {
        text_weights,
        image_weights,
        params,
        vocab: sidecar.vocab,
        config: sidecar.config,
        ablation: sidecar.ablation,
        classes: sidecar.classes,
        loss_log: sidecar.loss_log,
        shot_indices: sidecar.shot_indices,
    })
}
