//! Pieces shared by every trainer: optimizer settings, batch sampling,
//! batch assembly and the loss log.

use std::io::Write;
use std::path::Path;

use bcg_tensor::{clip_grad_norm, AdamW, LrSchedule, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_cascade, AugmentConfig};
use crate::dataset::{write_atomic, Dataset};
use crate::encoder::patchify;
use crate::error::{CoreError, Result};
use crate::model::Modality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_iters: u64,
    pub decay_gamma: f64,
    pub decay_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 256,
            max_lr: 1e-3,
            weight_decay: 1e-5,
            clip_norm: 3.0,
            warmup_iters: 20_000,
            decay_gamma: 0.985,
            decay_every: 1000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size < 2 {
            return Err(CoreError::Config("optimizer needs steps >= 1 and batch_size >= 2".into()));
        }
        if !(self.max_lr > 0.0) || self.weight_decay < 0.0 || !(self.clip_norm > 0.0) {
            return Err(CoreError::Config("max_lr and clip_norm must be positive, weight_decay non-negative".into()));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) || self.decay_every == 0 {
            return Err(CoreError::Config("decay_gamma must lie in (0, 1] and decay_every be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::warmup_exponential(self.max_lr, self.warmup_iters, self.decay_gamma, self.decay_every)
    }
}

/// Owns the AdamW states of several parameter stores and applies one
/// clipped update across all of them.
pub struct Optimizer {
    schedule: LrSchedule,
    clip: f64,
    adams: Vec<AdamW>,
}

impl Optimizer {
    pub fn new(cfg: &OptimConfig, n_stores: usize) -> Self {
        Self {
            schedule: cfg.schedule(),
            clip: cfg.clip_norm,
            adams: (0..n_stores).map(|_| AdamW::new(cfg.max_lr, cfg.weight_decay)).collect(),
        }
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        self.schedule.lr_at(iter)
    }

    /// Clips the joint gradient, updates every store at the scheduled rate
    /// for `iter` and returns `(lr, pre-clip grad norm)`.
    pub fn step(&mut self, iter: u64, stores: &mut [&mut ParamStore<f32>]) -> Result<(f64, f64)> {
        let lr = self.schedule.lr_at(iter);
        let norm = clip_grad_norm(stores, self.clip);
        if !norm.is_finite() {
            return Err(CoreError::Numeric(format!("non-finite gradient norm at iteration {iter}")));
        }
        for (adam, store) in self.adams.iter_mut().zip(stores.iter_mut()) {
            adam.lr = lr;
            adam.step(store)?;
        }
        Ok((lr, norm))
    }
}

/// Endless epoch-wise shuffled batches over a fixed index set. The last
/// partial batch of an epoch is dropped.
pub struct Batcher {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    pub epoch: u64,
}

impl Batcher {
    pub fn new(pool: Vec<usize>, batch: usize) -> Result<Self> {
        if pool.len() < batch {
            return Err(CoreError::Config(format!("batch size {batch} exceeds the {} available segments", pool.len())));
        }
        Ok(Self { order: Vec::new(), pool, pos: usize::MAX, batch, epoch: 0 })
    }

    /// Returns the next batch and whether it opened a new epoch.
    pub fn next<R: Rng>(&mut self, rng: &mut R) -> (Vec<usize>, bool) {
        let mut fresh = false;
        if self.pos.saturating_add(self.batch) > self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(rng);
            self.pos = 0;
            fresh = true;
            self.epoch += 1;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        (b, fresh)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pool.len() / self.batch
    }
}

/// Patches `[B, N, C * patch]` for the given segments, each independently
/// augmented when `augment` is given.
pub fn batch_patches<R: Rng>(
    data: &Dataset,
    indices: &[usize],
    modality: Modality,
    patch: usize,
    augment: Option<&AugmentConfig>,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let channels = modality.channels();
    let mut owned: Vec<Vec<f32>> = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut s = modality.signal(&data.segments[i]).to_vec();
        if let Some(cfg) = augment {
            apply_cascade(&mut s, channels, cfg, rng);
        }
        owned.push(s);
    }
    let views: Vec<&[f32]> = owned.iter().map(Vec::as_slice).collect();
    patchify(&views, channels, patch)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<StepRecord>,
}

impl LossLog {
    pub fn push(&mut self, iter: u64, lr: f64, loss: f64) {
        self.records.push(StepRecord { iter, lr, loss });
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn last(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Mean loss over the first and last `k` records.
    pub fn head_tail_mean(&self, k: usize) -> (f64, f64) {
        let l = self.losses();
        let k = k.clamp(1, l.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&l[..k.min(l.len())]), mean(&l[l.len().saturating_sub(k)..]))
    }

    /// The last `k` losses, newest first, for diagnostics.
    pub fn recent(&self, k: usize) -> String {
        let r: Vec<String> = self.records.iter().rev().take(k).map(|r| format!("{:.4}", r.loss)).collect();
        r.join(", ")
    }

    /// CSV with header `iter,lr,loss`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "iter,lr,loss").expect("write to vec");
        for r in &self.records {
            writeln!(buf, "{},{:e},{}", r.iter, r.lr, r.loss).expect("write to vec");
        }
        write_atomic(path, &buf)
    }
}

/// Aborts training with context when the loss stops being finite.
pub fn check_loss(stage: &str, iter: u64, lr: f64, loss: f64, log: &LossLog) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(CoreError::Numeric(format!(
        "{stage}: non-finite loss at iteration {iter} (lr {lr:e}); last losses [{}]",
        log.recent(5)
    )))
}
