//! Contrastive pre-training with a momentum (EMA) encoder, in-batch
//! negatives and a KoLeo spreading term.

use std::collections::BTreeMap;
use std::path::Path;

use bcg_tensor::{Float, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset::Dataset;
use crate::encoder::EncoderConfig;
use crate::error::{CoreError, Result};
use crate::model::{EncoderBundle, Modality};
use crate::train::{batch_patches, check_loss, Batcher, LossLog, OptimConfig, Optimizer};

const NORM_EPS: f64 = 1e-12;
/// Floor on nearest-neighbor distances inside [`koleo`].
pub const KOLEO_MIN_DIST: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    /// Two augmented views of one segment.
    Segment,
    /// Augmented views of two different segments of one participant.
    Participant,
}

impl PairMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "segment" => Ok(PairMode::Segment),
            "participant" => Ok(PairMode::Participant),
            _ => Err(CoreError::InvalidArgument(format!("unknown pair mode `{s}` (expected segment or participant)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClConfig {
    pub temperature: f64,
    pub koleo_weight: f64,
    pub momentum: f64,
    pub pairs: PairMode,
    pub optim: OptimConfig,
}

impl Default for ClConfig {
    fn default() -> Self {
        Self { temperature: 0.04, koleo_weight: 0.1, momentum: 0.99, pairs: PairMode::Segment, optim: OptimConfig::default() }
    }
}

impl ClConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(CoreError::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(CoreError::Config("momentum must lie in [0, 1]".into()));
        }
        if !(self.koleo_weight >= 0.0) {
            return Err(CoreError::Config("koleo_weight must be non-negative".into()));
        }
        self.optim.validate()
    }
}

fn check_rows<F: Float>(t: &Tape<F>, v: Var, what: &str) -> Result<(usize, usize)> {
    let s = t.shape(v);
    if s.len() != 2 || s[0] < 2 {
        return Err(CoreError::InvalidArgument(format!("{what} must be an N x D matrix with N >= 2, got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    for (i, row) in t.data(v).chunks(d).enumerate() {
        if row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>() <= NORM_EPS * NORM_EPS {
            return Err(CoreError::InvalidArgument(format!("{what} row {i} has zero norm")));
        }
    }
    Ok((n, d))
}

/// `-(1/N) sum_i log softmax_j(cos(a_i, k_j) / tau)[i]`: row `i` of `keys`
/// is the positive for row `i` of `anchors`.
pub fn infonce<F: Float>(t: &mut Tape<F>, anchors: Var, keys: Var, tau: f64) -> Result<Var> {
    let (n, d) = check_rows(t, anchors, "anchors")?;
    if check_rows(t, keys, "keys")? != (n, d) {
        return Err(CoreError::InvalidArgument("anchors and keys must have the same shape".into()));
    }
    let a = t.l2_normalize(anchors, NORM_EPS)?;
    let k = t.l2_normalize(keys, NORM_EPS)?;
    let kt = t.transpose(k)?;
    let sim = t.matmul(a, kt)?;
    let logits = t.scale(sim, 1.0 / tau)?;
    let logp = t.log_softmax(logits, 1)?;
    let mut eye = Tensor::zeros(&[n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = F::one();
    }
    let eye = t.constant(eye);
    let diag = t.mul(logp, eye)?;
    let total = t.sum_all(diag)?;
    Ok(t.scale(total, -1.0 / n as f64)?)
}

/// Kozachenko-Leonenko spreading term on L2-normalized rows:
/// `-(1/N) sum_i log min_{j != i} ||h_i - h_j||`. Returns the term and how
/// many rows had a duplicate (distance clamped to [`KOLEO_MIN_DIST`]).
pub fn koleo<F: Float>(t: &mut Tape<F>, emb: Var) -> Result<(Var, usize)> {
    let (n, d) = check_rows(t, emb, "embeddings")?;
    let h = t.l2_normalize(emb, NORM_EPS)?;
    let hv: Vec<f64> = t.data(h).iter().map(|x| x.as_f64()).collect();
    let mut nearest = Vec::with_capacity(n);
    let mut duplicates = 0;
    for i in 0..n {
        let ri = &hv[i * d..(i + 1) * d];
        let (best, dist2) = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, ri.iter().zip(&hv[j * d..(j + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("n >= 2");
        if dist2.sqrt() < KOLEO_MIN_DIST {
            duplicates += 1;
        }
        nearest.push(best);
    }
    if duplicates > 0 {
        log::warn!("koleo: {duplicates} rows have a duplicate neighbor; distances clamped");
    }
    let nn = t.gather_rows(h, &nearest)?;
    let diff = t.sub(h, nn)?;
    let sq = t.mul(diff, diff)?;
    let dist2 = t.sum(sq, 1)?;
    let dist2 = t.clamp_min(dist2, KOLEO_MIN_DIST * KOLEO_MIN_DIST)?;
    let dist = t.sqrt(dist2)?;
    let logd = t.log(dist)?;
    let m = t.mean_all(logd)?;
    Ok((t.neg(m)?, duplicates))
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update<F: Float>(teacher: &mut ParamStore<F>, student: &ParamStore<F>, m: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(CoreError::InvalidArgument("EMA stores hold different parameter sets".into()));
    }
    let (mf, rest) = (F::cast(m), F::cast(1.0 - m));
    for (tp, sp) in teacher.iter_mut().zip(student.iter()) {
        if tp.name != sp.name || tp.value.shape() != sp.value.shape() {
            return Err(CoreError::InvalidArgument(format!("EMA parameter mismatch: {} vs {}", tp.name, sp.name)));
        }
        if m == 1.0 {
            continue;
        }
        for (a, &b) in tp.value.data_mut().iter_mut().zip(sp.value.data()) {
            *a = mf * *a + rest * b;
        }
    }
    Ok(())
}

/// Symmetric two-view InfoNCE plus the weighted KoLeo term on `za`.
pub fn cl_loss<F: Float>(t: &mut Tape<F>, za: Var, zb: Var, cfg: &ClConfig) -> Result<Var> {
    let ab = infonce(t, za, zb, cfg.temperature)?;
    let ba = infonce(t, zb, za, cfg.temperature)?;
    let sum = t.add(ab, ba)?;
    let sym = t.scale(sum, 0.5)?;
    if cfg.koleo_weight == 0.0 {
        return Ok(sym);
    }
    let (k, _) = koleo(t, za)?;
    let k = t.scale(k, cfg.koleo_weight)?;
    Ok(t.add(sym, k)?)
}

#[derive(Debug)]
pub struct ClOutcome {
    /// Online encoder and head; the artifact used downstream.
    pub online: EncoderBundle,
    pub momentum: ParamStore<f32>,
    pub log: LossLog,
}

/// Picks, for every segment, a partner segment: itself, or a different
/// segment of the same participant drawn at random.
fn partners<R: Rng>(batch: &[usize], mode: PairMode, groups: &BTreeMap<u32, Vec<usize>>, data: &Dataset, rng: &mut R) -> Vec<usize> {
    match mode {
        PairMode::Segment => batch.to_vec(),
        PairMode::Participant => batch
            .iter()
            .map(|&i| {
                let group = &groups[&data.segments[i].participant_id];
                if group.len() < 2 {
                    return i;
                }
                loop {
                    let j = group[rng.random_range(0..group.len())];
                    if j != i {
                        return j;
                    }
                }
            })
            .collect(),
    }
}

pub fn train_cl(
    data: &Dataset,
    modality: Modality,
    enc_cfg: &EncoderConfig,
    cfg: &ClConfig,
    augment: &AugmentConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<ClOutcome> {
    cfg.validate()?;
    augment.validate()?;
    let mut online = EncoderBundle::random(enc_cfg.clone(), modality, true, seed)?;
    online.meta.method = "cl".into();
    let mut momentum = online.store.duplicate();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1);
    let pool = data.train_indices();
    let groups = data.by_participant(&pool);
    let mut batcher = Batcher::new(pool, cfg.optim.batch_size)?;
    let mut opt = Optimizer::new(&cfg.optim, 1);
    let patch = enc_cfg.patch_samples()?;
    let head = online.head.clone().expect("created with a head");
    let mut log = LossLog::default();
    for iter in 0..cfg.optim.steps {
        let (batch, new_epoch) = batcher.next(rng);
        if new_epoch && iter > 0 {
            if let Some(dir) = out_dir {
                online.save(&dir.join("ckpt").join("latest.bsdk"))?;
            }
        }
        let other = partners(&batch, cfg.pairs, &groups, data, rng);
        let va = batch_patches(data, &batch, modality, patch, Some(augment), rng)?;
        let vb = batch_patches(data, &other, modality, patch, Some(augment), rng)?;
        let zb = {
            let mut t = Tape::no_grad();
            let p = t.constant(vb);
            let e = online.encoder.embed(&mut t, &momentum, p)?;
            let z = head.forward(&mut t, &momentum, e)?;
            t.value(z).clone()
        };
        let mut t = Tape::new();
        let pa = t.constant(va);
        let e = online.encoder.embed(&mut t, &online.store, pa)?;
        let za = head.forward(&mut t, &online.store, e)?;
        let zb = t.constant(zb);
        let loss = cl_loss(&mut t, za, zb, cfg)?;
        let value = t.value(loss).item().as_f64();
        let lr = opt.lr_at(iter);
        check_loss("pretrain-cl", iter, lr, value, &log)?;
        online.store.zero_grad();
        t.backward(loss)?.accumulate_into(&mut online.store);
        drop(t);
        opt.step(iter, &mut [&mut online.store])?;
        ema_update(&mut momentum, &online.store, cfg.momentum)?;
        log.push(iter, lr, value);
        if iter % 100 == 0 {
            log::info!("cl iter {iter} lr {lr:.2e} loss {value:.5}");
        }
    }
    if let Some(dir) = out_dir {
        online.save(&dir.join("ckpt").join("latest.bsdk"))?;
        log.write_csv(&dir.join("loss.csv"))?;
    }
    Ok(ClOutcome { online, momentum, log })
}
