//! Fully supervised baseline: an encoder plus a linear output trained end
//! to end on one target with an MSE loss.

use std::collections::BTreeMap;

use bcg_tensor::{Float, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoder::{EncoderConfig, Linear};
use crate::error::{CoreError, Result};
use crate::eval::{score, subsample_labels, Granularity, ProbeReport, Target};
use crate::model::{EncoderBundle, Modality};
use crate::train::{batch_patches, check_loss, Batcher, LossLog, OptimConfig, Optimizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub optim: OptimConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self { optim: OptimConfig { steps: 1500, batch_size: 64, max_lr: 1e-3, warmup_iters: 100, ..OptimConfig::default() } }
    }
}

#[derive(Debug)]
pub struct SupervisedOutcome {
    pub bundle: EncoderBundle,
    pub output: Linear,
    pub report: ProbeReport,
    pub log: LossLog,
}

/// Trains from scratch on `round(fraction * train)` labelled segments and
/// scores on the held-out participants. Participant granularity averages
/// segment predictions per participant.
#[allow(clippy::too_many_arguments)]
pub fn supervised_baseline(
    data: &Dataset,
    modality: Modality,
    enc_cfg: &EncoderConfig,
    cfg: &SupervisedConfig,
    target: Target,
    granularity: Granularity,
    fraction: f64,
    seed: u64,
) -> Result<SupervisedOutcome> {
    cfg.optim.validate()?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::InvalidArgument(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let train = subsample_labels(data, &data.train_indices(), fraction, rng);
    if train.is_empty() {
        return Err(CoreError::InvalidArgument(format!("label fraction {fraction} leaves no training segments")));
    }
    let y: Vec<f64> = train.iter().map(|&i| target.value(data, i)).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    let sd = if sd > 1e-12 { sd } else { 1.0 };
    let label: BTreeMap<usize, f32> = train.iter().zip(&y).map(|(&i, &v)| (i, ((v - mean) / sd) as f32)).collect();

    let mut bundle = EncoderBundle::random(enc_cfg.clone(), modality, false, seed)?;
    bundle.meta.method = "supervised".into();
    let output = Linear::new(&mut bundle.store, "output.w", "output.b", enc_cfg.token_dim, 1, rng);
    let batch = cfg.optim.batch_size.min(train.len());
    let mut batcher = Batcher::new(train.clone(), batch)?;
    let mut opt = Optimizer::new(&cfg.optim, 1);
    let patch = enc_cfg.patch_samples()?;
    let mut log = LossLog::default();
    for iter in 0..cfg.optim.steps {
        let (idx, _) = batcher.next(rng);
        let x = batch_patches(data, &idx, modality, patch, None, rng)?;
        let yt = Tensor::new(vec![idx.len(), 1], idx.iter().map(|i| label[i]).collect())?;
        let mut t = Tape::new();
        let p = t.constant(x);
        let e = bundle.encoder.embed(&mut t, &bundle.store, p)?;
        let pred = output.forward(&mut t, &bundle.store, e)?;
        let yv = t.constant(yt);
        let diff = t.sub(pred, yv)?;
        let sq = t.mul(diff, diff)?;
        let loss = t.mean_all(sq)?;
        let value = t.value(loss).item().as_f64();
        let lr = opt.lr_at(iter);
        check_loss("supervised", iter, lr, value, &log)?;
        bundle.store.zero_grad();
        t.backward(loss)?.accumulate_into(&mut bundle.store);
        drop(t);
        opt.step(iter, &mut [&mut bundle.store])?;
        log.push(iter, lr, value);
        if iter % 100 == 0 {
            log::info!("supervised iter {iter} lr {lr:.2e} loss {value:.5}");
        }
    }

    let test = data.test_indices();
    let emb = bundle.embed(data, &test, false)?;
    let w = bundle.store.value(output.w).data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let b = bundle.store.value(output.b).data()[0] as f64;
    let seg_pred: Vec<f64> = emb.iter().map(|r| (r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b) * sd + mean).collect();
    let seg_true: Vec<f64> = test.iter().map(|&i| target.value(data, i)).collect();
    let (y_true, y_pred, n_train) = match granularity {
        Granularity::Segment => (seg_true, seg_pred, train.len()),
        Granularity::Participant => {
            let pos: BTreeMap<usize, usize> = test.iter().enumerate().map(|(k, &i)| (i, k)).collect();
            let groups = data.by_participant(&test);
            let avg = |v: &[f64], segs: &[usize]| segs.iter().map(|s| v[pos[s]]).sum::<f64>() / segs.len() as f64;
            let yt = groups.values().map(|g| avg(&seg_true, g)).collect();
            let yp = groups.values().map(|g| avg(&seg_pred, g)).collect();
            (yt, yp, data.by_participant(&train).len())
        }
    };
    let report = ProbeReport {
        target,
        granularity,
        label_fraction: fraction,
        n_train,
        n_test: y_true.len(),
        metrics: score(target, &y_true, &y_pred)?,
        alpha: None,
    };
    Ok(SupervisedOutcome { bundle, output, report, log })
}
