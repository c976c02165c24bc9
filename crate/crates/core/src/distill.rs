//! Cross-modal representational distillation: a (usually frozen) teacher
//! on one modality, a student on the other, each followed by its own
//! trainable projection head, tied together by a weighted pair of InfoNCE
//! terms.

use std::path::{Path, PathBuf};

use bcg_tensor::{Float, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::cl::infonce;
use crate::dataset::Dataset;
use crate::encoder::EncoderConfig;
use crate::error::{CoreError, Result};
use crate::model::{EncoderBundle, Modality};
use crate::train::{batch_patches, Batcher, LossLog, OptimConfig, Optimizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherInit {
    Random,
    Pretrained,
}

impl TeacherInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(TeacherInit::Random),
            "pretrained" => Ok(TeacherInit::Pretrained),
            _ => Err(CoreError::InvalidArgument(format!("unknown teacher init `{s}` (expected random or pretrained)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight of the teacher-anchored term.
    pub lambda: f64,
    pub temperature: f64,
    pub freeze_teacher: bool,
    pub teacher_ckpt: Option<PathBuf>,
    /// Only consulted when the teacher is trained along with the student.
    pub teacher_init: TeacherInit,
    /// Student architecture; `None` mirrors the teacher.
    pub student: Option<EncoderConfig>,
    pub head_hidden: usize,
    pub head_out: usize,
    pub optim: OptimConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            temperature: 0.04,
            freeze_teacher: true,
            teacher_ckpt: None,
            teacher_init: TeacherInit::Pretrained,
            student: None,
            head_hidden: crate::encoder::HEAD_HIDDEN,
            head_out: crate::encoder::HEAD_OUT,
            optim: OptimConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CoreError::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(CoreError::Config("temperature must be positive".into()));
        }
        if self.head_hidden == 0 || self.head_out == 0 {
            return Err(CoreError::Config("projection head sizes must be positive".into()));
        }
        if let Some(s) = &self.student {
            s.validate()?;
        }
        self.optim.validate()
    }
}

/// `lambda * InfoNCE(teacher -> student) + (1 - lambda) * InfoNCE(student -> teacher)`.
pub fn distill_loss<F: Float>(t: &mut Tape<F>, ht: Var, hs: Var, lambda: f64, tau: f64) -> Result<Var> {
    if lambda == 1.0 {
        return infonce(t, ht, hs, tau);
    }
    if lambda == 0.0 {
        return infonce(t, hs, ht, tau);
    }
    let ts = infonce(t, ht, hs, tau)?;
    let st = infonce(t, hs, ht, tau)?;
    let a = t.scale(ts, lambda)?;
    let b = t.scale(st, 1.0 - lambda)?;
    Ok(t.add(a, b)?)
}

/// Teacher and student with their heads and the joint optimizer state.
pub struct Distiller {
    pub teacher: EncoderBundle,
    pub student: EncoderBundle,
    pub cfg: DistillConfig,
    pub augment: AugmentConfig,
    opt: Optimizer,
    iter: u64,
}

impl Distiller {
    /// `source` supplies the teacher architecture and, unless the teacher
    /// is trained from a random start, its weights.
    pub fn new(source: &EncoderBundle, cfg: &DistillConfig, augment: &AugmentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        augment.validate()?;
        let t_mod = source.modality();
        let s_mod = match t_mod {
            Modality::Ppg => Modality::Accel,
            Modality::Accel => Modality::Ppg,
        };
        let mut s_cfg = cfg.student.clone().unwrap_or_else(|| source.meta.encoder.clone());
        if cfg.student.is_none() {
            s_cfg.input_channels = s_mod.channels();
        }
        let mut teacher = EncoderBundle::with_head(source.meta.encoder.clone(), t_mod, cfg.head_hidden, cfg.head_out, seed)?;
        if cfg.freeze_teacher || cfg.teacher_init == TeacherInit::Pretrained {
            // Encoder weights only: the heads always start fresh.
            let n = teacher.store.load_from(&source.encoder_checkpoint(), "")?;
            let wanted = teacher.store.iter().filter(|p| !p.name.starts_with("head.")).count();
            if n != wanted {
                return Err(CoreError::Data(format!("teacher checkpoint provides {n} of {wanted} encoder tensors")));
            }
        }
        if cfg.freeze_teacher {
            for p in teacher.store.iter_mut() {
                p.trainable = p.name.starts_with("head.");
            }
        }
        teacher.meta.method = "kd-teacher".into();
        let mut student = EncoderBundle::with_head(s_cfg, s_mod, cfg.head_hidden, cfg.head_out, seed.wrapping_add(1))?;
        student.meta.method = "kd".into();
        Ok(Self { teacher, student, cfg: cfg.clone(), augment: augment.clone(), opt: Optimizer::new(&cfg.optim, 2), iter: 0 })
    }

    /// One update on the segments `batch`. Returns `(loss, lr)`.
    pub fn step<R: Rng>(&mut self, data: &Dataset, batch: &[usize], rng: &mut R) -> Result<(f64, f64)> {
        let (tm, sm) = (self.teacher.modality(), self.student.modality());
        if tm == sm || self.teacher.meta.encoder.input_channels != tm.channels() || self.student.meta.encoder.input_channels != sm.channels() {
            return Err(CoreError::InvalidArgument("teacher and student must cover different modalities with matching channels".into()));
        }
        let tp = batch_patches(data, batch, tm, self.teacher.meta.encoder.patch_samples()?, Some(&self.augment), rng)?;
        let sp = batch_patches(data, batch, sm, self.student.meta.encoder.patch_samples()?, Some(&self.augment), rng)?;
        let t_head = self.teacher.head.clone().expect("teacher has a head");
        let s_head = self.student.head.clone().expect("student has a head");
        let frozen_emb = if self.cfg.freeze_teacher {
            let mut nt = Tape::no_grad();
            let p = nt.constant(tp.clone());
            let e = self.teacher.encoder.embed(&mut nt, &self.teacher.store, p)?;
            Some(nt.value(e).clone())
        } else {
            None
        };
        let mut t = Tape::new();
        let te = match frozen_emb {
            Some(e) => t.constant(e),
            None => {
                let p = t.constant(tp);
                self.teacher.encoder.embed(&mut t, &self.teacher.store, p)?
            }
        };
        let ht = t_head.forward(&mut t, &self.teacher.store, te)?;
        let p = t.constant(sp);
        let se = self.student.encoder.embed(&mut t, &self.student.store, p)?;
        let hs = s_head.forward(&mut t, &self.student.store, se)?;
        let loss = distill_loss(&mut t, ht, hs, self.cfg.lambda, self.cfg.temperature)?;
        let value = t.value(loss).item().as_f64();
        let lr = self.opt.lr_at(self.iter);
        if !value.is_finite() {
            return Err(CoreError::Numeric(format!("distill: non-finite loss at iteration {} (lr {lr:e})", self.iter)));
        }
        self.teacher.store.zero_grad();
        self.student.store.zero_grad();
        let grads = t.backward(loss)?;
        grads.accumulate_into(&mut self.teacher.store);
        grads.accumulate_into(&mut self.student.store);
        drop(t);
        self.opt.step(self.iter, &mut [&mut self.student.store, &mut self.teacher.store])?;
        self.iter += 1;
        Ok((value, lr))
    }
}

#[derive(Debug)]
pub struct DistillOutcome {
    pub student: EncoderBundle,
    pub teacher: EncoderBundle,
    pub log: LossLog,
}

/// Loads the teacher from `cfg.teacher_ckpt` and runs [`train_distill`].
pub fn train_distill_from_ckpt(
    data: &Dataset,
    cfg: &DistillConfig,
    augment: &AugmentConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<DistillOutcome> {
    let path = cfg.teacher_ckpt.as_ref().ok_or_else(|| CoreError::Config("distillation needs a teacher checkpoint".into()))?;
    let source = EncoderBundle::load(path)?;
    train_distill(data, &source, cfg, augment, seed, out_dir)
}

pub fn train_distill(
    data: &Dataset,
    source: &EncoderBundle,
    cfg: &DistillConfig,
    augment: &AugmentConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<DistillOutcome> {
    let mut d = Distiller::new(source, cfg, augment, seed)?;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ 0xd157_111);
    let mut batcher = Batcher::new(data.train_indices(), cfg.optim.batch_size)?;
    let mut log = LossLog::default();
    let save = |d: &Distiller, dir: &Path| -> Result<()> {
        d.student.save(&dir.join("ckpt").join("student.bsdk"))?;
        d.teacher.save(&dir.join("ckpt").join("teacher.bsdk"))
    };
    for iter in 0..cfg.optim.steps {
        let (batch, new_epoch) = batcher.next(rng);
        if new_epoch && iter > 0 {
            if let Some(dir) = out_dir {
                save(&d, dir)?;
            }
        }
        let (loss, lr) = match d.step(data, &batch, rng) {
            Err(CoreError::Numeric(msg)) => return Err(CoreError::Numeric(format!("{msg}; last losses [{}]", log.recent(5)))),
            other => other?,
        };
        log.push(iter, lr, loss);
        if iter % 100 == 0 {
            log::info!("distill iter {iter} lr {lr:.2e} loss {loss:.5}");
        }
    }
    if let Some(dir) = out_dir {
        save(&d, dir)?;
        log.write_csv(&dir.join("loss.csv"))?;
    }
    Ok(DistillOutcome { student: d.student, teacher: d.teacher, log })
}
