//! Encoder artifacts on disk and batched embedding extraction.
//!
//! A model file `X.bsdk` holds the parameter tensors; `X.json` next to it
//! records the encoder configuration, modality and training method.

use std::path::{Path, PathBuf};

use bcg_tensor::{Checkpoint, ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_atomic, Dataset};
use crate::encoder::{patchify, Encoder, EncoderConfig, ProjectionHead, HEAD_HIDDEN, HEAD_OUT};
use crate::error::{CoreError, Result};
use crate::synth::{SegmentPair, ACCEL_CHANNELS, PPG_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ppg,
    Accel,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ppg" => Ok(Modality::Ppg),
            "accel" => Ok(Modality::Accel),
            _ => Err(CoreError::InvalidArgument(format!("unknown modality `{s}` (expected ppg or accel)"))),
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Ppg => PPG_CHANNELS,
            Modality::Accel => ACCEL_CHANNELS,
        }
    }

    pub fn signal(self, seg: &SegmentPair) -> &[f32] {
        match self {
            Modality::Ppg => &seg.ppg,
            Modality::Accel => &seg.accel,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Ppg => "ppg",
            Modality::Accel => "accel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    /// Training method, e.g. `mae`, `cl`, `kd`, `supervised`, `random`.
    pub method: String,
    pub modality: Modality,
    pub encoder: EncoderConfig,
    /// `[hidden, out]` widths of the projection head, if saved with one.
    pub head: Option<[usize; 2]>,
}

/// Sidecar path for a model file.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_model(path: &Path, store: &ParamStore<f32>, meta: &ModelMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    store.to_checkpoint().save(path)?;
    let json = serde_json::to_vec_pretty(meta).map_err(|e| CoreError::json(path, e))?;
    write_atomic(&meta_path(path), &json)
}

pub fn load_meta(path: &Path) -> Result<ModelMeta> {
    let mp = meta_path(path);
    let text = std::fs::read(&mp).map_err(|e| CoreError::io(&mp, e))?;
    serde_json::from_slice(&text).map_err(|e| CoreError::json(&mp, e))
}

/// An encoder (and optionally its projection head) with its own store.
#[derive(Debug)]
pub struct EncoderBundle {
    pub meta: ModelMeta,
    pub encoder: Encoder,
    pub head: Option<ProjectionHead>,
    pub store: ParamStore<f32>,
}

impl EncoderBundle {
    /// Fresh encoder, with the default projection head if `with_head`.
    pub fn random(config: EncoderConfig, modality: Modality, with_head: bool, seed: u64) -> Result<Self> {
        Self::build(config, modality, with_head.then_some([HEAD_HIDDEN, HEAD_OUT]), seed)
    }

    pub fn with_head(config: EncoderConfig, modality: Modality, hidden: usize, out: usize, seed: u64) -> Result<Self> {
        Self::build(config, modality, Some([hidden, out]), seed)
    }

    fn build(config: EncoderConfig, modality: Modality, head: Option<[usize; 2]>, seed: u64) -> Result<Self> {
        if config.input_channels != modality.channels() {
            return Err(CoreError::InvalidArgument(format!(
                "{} has {} channels but the encoder expects {}",
                modality.name(),
                modality.channels(),
                config.input_channels
            )));
        }
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.clone(), &mut store, rng)?;
        let head_layers = head.map(|[h, o]| ProjectionHead::new(&mut store, "head", config.token_dim, h, o, rng));
        let meta = ModelMeta { method: "random".into(), modality, encoder: config, head };
        Ok(Self { meta, encoder, head: head_layers, store })
    }

    /// Loads the encoder (and head if recorded) from a model file. Extra
    /// tensors such as a reconstruction decoder are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CoreError::InvalidArgument(format!("model file {} does not exist", path.display())));
        }
        let meta = load_meta(path)?;
        let mut bundle = Self::build(meta.encoder.clone(), meta.modality, meta.head, 0)?;
        let ckpt = Checkpoint::load(path)?;
        let n = bundle.store.load_from(&ckpt, "")?;
        if n != bundle.store.len() {
            return Err(CoreError::Data(format!(
                "{}: only {n} of {} encoder tensors present",
                path.display(),
                bundle.store.len()
            )));
        }
        bundle.meta = meta;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(path, &self.store, &self.meta)
    }

    pub fn modality(&self) -> Modality {
        self.meta.modality
    }

    /// Checkpoint view of the encoder tensors only (no head).
    pub fn encoder_checkpoint(&self) -> Checkpoint {
        let mut c = self.store.to_checkpoint();
        c.tensors.retain(|t| !t.name.starts_with("head."));
        c
    }

    pub fn dim(&self) -> usize {
        self.encoder.config.token_dim
    }

    /// Pooled encoder outputs (`projected = false`) or projection-head
    /// outputs for `indices`, one row each, in eval mode.
    pub fn embed(&self, data: &Dataset, indices: &[usize], projected: bool) -> Result<Vec<Vec<f64>>> {
        if projected && self.head.is_none() {
            return Err(CoreError::InvalidArgument("model has no projection head".into()));
        }
        let cfg = &self.encoder.config;
        let mut rows = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(64) {
            let sigs: Vec<&[f32]> = chunk.iter().map(|&i| self.modality().signal(&data.segments[i])).collect();
            let patches = patchify::<f32>(&sigs, cfg.input_channels, cfg.patch_samples()?)?;
            let mut t = Tape::no_grad();
            let p = t.constant(patches);
            let mut e = self.encoder.embed(&mut t, &self.store, p)?;
            if projected {
                e = self.head.as_ref().expect("checked above").forward(&mut t, &self.store, e)?;
            }
            let width = t.shape(e)[1];
            rows.extend(t.data(e).chunks(width).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<f64>>()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite embedding".into()));
        }
        Ok(rows)
    }
}
