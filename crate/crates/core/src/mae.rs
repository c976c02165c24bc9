//! Masked-autoencoder pre-training: most patch tokens are dropped, the
//! encoder sees the rest, and a light decoder reconstructs the dropped
//! patches' raw values.

use std::path::Path;

use bcg_tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoder::{patchify, positional_embedding, unpatchify, BlockStack, Encoder, EncoderConfig, Linear};
use crate::error::{CoreError, Result};
use crate::model::{save_model, EncoderBundle, Modality, ModelMeta};
use crate::train::{batch_patches, check_loss, Batcher, LossLog, OptimConfig, Optimizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaeConfig {
    pub mask_ratio: f64,
    pub decoder_layers: usize,
    pub optim: OptimConfig,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self { mask_ratio: 0.8, decoder_layers: 4, optim: OptimConfig { batch_size: 512, max_lr: 2e-4, ..OptimConfig::default() } }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(CoreError::Config(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio)));
        }
        if self.decoder_layers == 0 {
            return Err(CoreError::Config("decoder needs at least one layer".into()));
        }
        self.optim.validate()
    }
}

/// Number of tokens kept at `ratio`: `floor(n * (1 - ratio))`, at least 1.
pub fn kept_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * (1.0 - ratio)).floor() as usize).clamp(1, n)
}

/// Uniform random split of `0..n` into sorted (kept, masked) index sets.
pub fn mask_indices<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let k = kept_count(n, ratio);
    let mut keep = vec![false; n];
    for i in index::sample(rng, n, k) {
        keep[i] = true;
    }
    let kept = (0..n).filter(|&i| keep[i]).collect();
    let masked = (0..n).filter(|&i| !keep[i]).collect();
    (kept, masked)
}

/// Per-sample masks for a `[B, N, D]` token tensor; returns the kept
/// tokens `[B, K, D]` with the index sets.
pub fn mask_tokens<F: Float, R: Rng>(
    t: &mut Tape<F>,
    tokens: Var,
    ratio: f64,
    rng: &mut R,
) -> Result<(Var, Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let (b, n) = (t.shape(tokens)[0], t.shape(tokens)[1]);
    let (kept, masked): (Vec<_>, Vec<_>) = (0..b).map(|_| mask_indices(n, ratio, rng)).unzip();
    let k = t.take_tokens(tokens, &kept)?;
    Ok((k, kept, masked))
}

/// Mean squared error over the pixels of masked patches only. Zero when
/// nothing is masked.
pub fn mae_loss<F: Float>(t: &mut Tape<F>, recon: Var, target: Var, masked: &[Vec<usize>]) -> Result<Var> {
    if masked.iter().all(Vec::is_empty) {
        return Ok(t.constant(Tensor::scalar(F::zero())));
    }
    let diff = t.sub(recon, target)?;
    let picked = t.take_tokens(diff, masked)?;
    let sq = t.mul(picked, picked)?;
    Ok(t.mean_all(sq)?)
}

/// Encoder plus reconstruction decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct MaeModel {
    pub encoder: Encoder,
    pub mask_token: ParamId,
    decoder: BlockStack,
    pred: Linear,
}

impl MaeModel {
    pub fn new<F: Float, R: Rng>(cfg: EncoderConfig, decoder_layers: usize, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        let d = cfg.token_dim;
        let encoder = Encoder::new(cfg.clone(), store, rng)?;
        let init: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let mask_token = store.add("mask_token", Tensor::from_f64(&[d], &init)?);
        let decoder = BlockStack::new(store, "decoder.", decoder_layers, d, cfg.mlp_hidden, cfg.n_heads, rng);
        let pred = Linear::new(store, "decoder.pred.w", "decoder.pred.b", d, cfg.patch_dim()?, rng);
        Ok(Self { encoder, mask_token, decoder, pred })
    }

    /// Predicted patches `[B, N, C * patch]` from kept-token index sets.
    pub fn forward<F: Float>(&self, t: &mut Tape<F>, store: &ParamStore<F>, patches: Var, kept: &[Vec<usize>]) -> Result<Var> {
        let n = t.shape(patches)[1];
        let tokens = self.encoder.tokenize(t, store, patches)?;
        let tokens = self.encoder.add_positions(t, tokens)?;
        let visible = t.take_tokens(tokens, kept)?;
        let encoded = self.encoder.transform(t, store, visible)?;
        let fill = t.param(store, self.mask_token);
        let full = t.scatter_tokens(encoded, fill, kept, n)?;
        let pe = t.constant(positional_embedding(n, self.encoder.config.token_dim));
        let full = t.add(full, pe)?;
        let decoded = self.decoder.forward(t, store, full)?;
        self.pred.forward(t, store, decoded)
    }

    /// Draws independent per-sample masks and returns the masked-patch loss.
    pub fn loss<F: Float, R: Rng>(
        &self,
        t: &mut Tape<F>,
        store: &ParamStore<F>,
        patches: Var,
        ratio: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let (b, n) = (t.shape(patches)[0], t.shape(patches)[1]);
        let (kept, masked): (Vec<_>, Vec<_>) = (0..b).map(|_| mask_indices(n, ratio, rng)).unzip();
        let recon = self.forward(t, store, patches, &kept)?;
        mae_loss(t, recon, patches, &masked)
    }

    /// Reconstructions in signal layout (`C x T` per segment).
    pub fn reconstruct(&self, store: &ParamStore<f32>, signals: &[&[f32]], kept: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
        let cfg = &self.encoder.config;
        let patches = patchify::<f32>(signals, cfg.input_channels, cfg.patch_samples()?)?;
        let mut t = Tape::no_grad();
        let p = t.constant(patches);
        let out = self.forward(&mut t, store, p, kept)?;
        let per = t.shape(out)[1] * t.shape(out)[2];
        Ok(t.data(out).chunks(per).map(|c| unpatchify(c, cfg.input_channels, cfg.patch_samples().unwrap_or(1))).collect())
    }
}

#[derive(Debug)]
pub struct MaeOutcome {
    pub model: MaeModel,
    pub store: ParamStore<f32>,
    pub log: LossLog,
}

impl MaeOutcome {
    pub fn bundle(&self, modality: Modality) -> Result<EncoderBundle> {
        let mut b = EncoderBundle::random(self.model.encoder.config.clone(), modality, false, 0)?;
        let n = b.store.load_from(&self.store.to_checkpoint(), "")?;
        debug_assert_eq!(n, b.store.len());
        b.meta.method = "mae".into();
        Ok(b)
    }
}

fn meta(cfg: &EncoderConfig, modality: Modality) -> ModelMeta {
    ModelMeta { method: "mae".into(), modality, encoder: cfg.clone(), head: None }
}

/// Full pre-training loop over the training split. With `out_dir`, the
/// model is checkpointed to `ckpt/latest.bsdk` at each epoch boundary and
/// the loss log written to `loss.csv`.
pub fn train_mae(
    data: &Dataset,
    modality: Modality,
    enc_cfg: &EncoderConfig,
    cfg: &MaeConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<MaeOutcome> {
    cfg.validate()?;
    enc_cfg.validate()?;
    if enc_cfg.input_channels != modality.channels() {
        return Err(CoreError::Config(format!(
            "{} encoder must take {} channels, not {}",
            modality.name(),
            modality.channels(),
            enc_cfg.input_channels
        )));
    }
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = MaeModel::new(enc_cfg.clone(), cfg.decoder_layers, &mut store, rng)?;
    let mut opt = Optimizer::new(&cfg.optim, 1);
    let mut batcher = Batcher::new(data.train_indices(), cfg.optim.batch_size)?;
    let patch = enc_cfg.patch_samples()?;
    let mut log = LossLog::default();
    for iter in 0..cfg.optim.steps {
        let (batch, new_epoch) = batcher.next(rng);
        if new_epoch && iter > 0 {
            if let Some(dir) = out_dir {
                save_model(&dir.join("ckpt").join("latest.bsdk"), &store, &meta(enc_cfg, modality))?;
            }
        }
        let patches = batch_patches(data, &batch, modality, patch, None, rng)?;
        let mut t = Tape::new();
        let p = t.constant(patches);
        let loss = model.loss(&mut t, &store, p, cfg.mask_ratio, rng)?;
        let value = t.value(loss).item().as_f64();
        let lr = opt.lr_at(iter);
        check_loss("pretrain-mae", iter, lr, value, &log)?;
        store.zero_grad();
        t.backward(loss)?.accumulate_into(&mut store);
        drop(t);
        opt.step(iter, &mut [&mut store])?;
        log.push(iter, lr, value);
        if iter % 100 == 0 {
            log::info!("mae iter {iter} lr {lr:.2e} loss {value:.5}");
        }
    }
    if let Some(dir) = out_dir {
        save_model(&dir.join("ckpt").join("latest.bsdk"), &store, &meta(enc_cfg, modality))?;
        log.write_csv(&dir.join("loss.csv"))?;
    }
    Ok(MaeOutcome { model, store, log })
}
