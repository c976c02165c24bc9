//! Stage runners shared by the command line and the canned recipes, and
//! the recipes themselves. Every stage writes into its own subdirectory of
//! a run and reports scalar results through [`Run::record`].

use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::dataset::Dataset;
use crate::distill::{train_distill, DistillConfig, DistillOutcome, TeacherInit};
use crate::encoder::{param_count, SizeTag};
use crate::error::{CoreError, Result};
use crate::eval::{
    bootstrap_retrieval, cross_modal_retrieval, embed_split, probe_embeddings, procrustes_align, Granularity, ProbeReport,
    RetrievalReport, Target,
};
use crate::experiment::{acquire_dataset, EncoderSection, ExperimentConfig, Run, RunManifest};
use crate::mae::train_mae;
use crate::model::{EncoderBundle, Modality};
use crate::supervised::supervised_baseline;

/// Label fractions of the label-efficiency sweep.
pub const SWEEP_FRACTIONS: [f64; 4] = [0.001, 0.01, 0.1, 1.0];
/// Weights of the teacher-anchored term in the lambda ablation.
pub const LAMBDA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

pub const RECIPES: [&str; 6] = ["label-sweep", "retrieval", "compression", "ablate-lambda", "ablate-teacher", "ablate-augment"];

/// Runs `f` and tags any failure with the stage name.
pub fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| match e {
        e @ CoreError::Stage { .. } => e,
        e => CoreError::Stage { stage: name.to_string(), source: Box::new(e) },
    })
}

/// Distinct, reproducible seed per stage of one experiment.
pub fn stage_seed(base: u64, stage: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

pub fn pretrain_mae_stage(cfg: &ExperimentConfig, data: &Dataset, modality: Modality, dir: &Path, run: &mut Run) -> Result<EncoderBundle> {
    let name = format!("{}-mae", modality.name());
    stage(&name, || {
        let enc = cfg.encoder_for(modality);
        let out = train_mae(data, modality, &enc, &cfg.mae, stage_seed(cfg.seed, 1 + modality as u64), Some(dir))?;
        let (head, tail) = out.log.head_tail_mean(50);
        run.record(&name, "loss_first50", head);
        run.record(&name, "loss_last50", tail);
        run.artifact(&dir.join("ckpt").join("latest.bsdk"));
        out.bundle(modality)
    })
}

pub fn pretrain_cl_stage(
    cfg: &ExperimentConfig,
    data: &Dataset,
    modality: Modality,
    augment: &AugmentConfig,
    dir: &Path,
    run: &mut Run,
) -> Result<EncoderBundle> {
    let name = format!("{}-cl", modality.name());
    stage(&name, || {
        let enc = cfg.encoder_for(modality);
        let out = crate::cl::train_cl(data, modality, &enc, &cfg.cl, augment, stage_seed(cfg.seed, 3 + modality as u64), Some(dir))?;
        let (head, tail) = out.log.head_tail_mean(50);
        run.record(&name, "loss_first50", head);
        run.record(&name, "loss_last50", tail);
        run.artifact(&dir.join("ckpt").join("latest.bsdk"));
        Ok(out.online)
    })
}

pub fn distill_stage(
    name: &str,
    dcfg: &DistillConfig,
    augment: &AugmentConfig,
    data: &Dataset,
    teacher: &EncoderBundle,
    seed: u64,
    dir: &Path,
    run: &mut Run,
) -> Result<DistillOutcome> {
    stage(name, || {
        let out = train_distill(data, teacher, dcfg, augment, seed, Some(dir))?;
        let (head, tail) = out.log.head_tail_mean(50);
        run.record(name, "loss_first50", head);
        run.record(name, "loss_last50", tail);
        run.artifact(&dir.join("ckpt").join("student.bsdk"));
        run.artifact(&dir.join("ckpt").join("teacher.bsdk"));
        Ok(out)
    })
}

/// Random accelerometry encoder with a projection head shaped like the
/// distillation heads.
pub fn untrained_student(cfg: &ExperimentConfig, size: Option<SizeTag>, seed: u64) -> Result<EncoderBundle> {
    let section = size.map_or_else(|| cfg.encoder.clone(), EncoderSection::preset);
    let enc = section.for_modality(Modality::Accel, &cfg.data.synth);
    let mut b = EncoderBundle::with_head(enc, Modality::Accel, cfg.distill.head_hidden, cfg.distill.head_out, seed)?;
    b.meta.method = "untrained".into();
    Ok(b)
}

pub fn record_probe(run: &mut Run, cell: &str, r: &ProbeReport) {
    let m = &r.metrics;
    for (k, v) in [("mae", m.mae), ("rmse", m.rmse), ("pearson_r", m.pearson_r), ("roc_auc", m.roc_auc), ("alpha", r.alpha)] {
        if let Some(v) = v {
            run.record(cell, k, v);
        }
    }
    run.record(cell, "n_train", r.n_train as f64);
}

pub fn probe_cell_name(model: &str, target: Target, granularity: Granularity, fraction: f64) -> String {
    let g = match granularity {
        Granularity::Segment => "segment",
        Granularity::Participant => "participant",
    };
    format!("{model}/{}/{g}/{fraction}", target.name())
}

/// Probes one frozen encoder for every configured target at each fraction.
/// A fraction that leaves too few rows is noted and skipped; any other
/// error aborts.
pub fn probe_stage(
    cfg: &ExperimentConfig,
    data: &Dataset,
    model: &str,
    bundle: &EncoderBundle,
    fractions: &[f64],
    run: &mut Run,
) -> Result<Vec<(String, ProbeReport)>> {
    stage(&format!("probe {model}"), || {
        let emb = embed_split(bundle, data, false)?;
        let mut out = Vec::new();
        for &target in &cfg.eval.targets {
            let granularity = if target.is_binary() { Granularity::Participant } else { cfg.eval.granularity };
            for &f in fractions {
                let cell = probe_cell_name(model, target, granularity, f);
                match probe_embeddings(data, &emb, target, granularity, f, stage_seed(cfg.seed, 100)) {
                    Ok(r) => {
                        record_probe(run, &cell, &r);
                        out.push((cell, r));
                    }
                    Err(CoreError::InvalidArgument(msg)) if msg.contains("training rows") => {
                        run.note(format!("{cell}: skipped, {msg}"));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(out)
    })
}

pub fn record_retrieval(run: &mut Run, cell: &str, r: &RetrievalReport) {
    run.record(cell, "top1_percent", r.top1_accuracy_percent_mean);
    run.record(cell, "top1_percent_std", r.top1_accuracy_percent_std);
    run.record(cell, "mean_rank", r.mean_rank_mean);
    run.record(cell, "mean_rank_std", r.mean_rank_std);
    run.record(cell, "pool_size", r.pool_size);
}

pub fn retrieval_stage(
    cfg: &ExperimentConfig,
    data: &Dataset,
    cell: &str,
    query: &EncoderBundle,
    key: &EncoderBundle,
    run: &mut Run,
) -> Result<RetrievalReport> {
    stage(&format!("retrieval {cell}"), || {
        let e = &cfg.eval;
        let r = cross_modal_retrieval(query, key, data, e.space.projected(), e.pool_participants, e.n_pools, stage_seed(cfg.seed, 200))?;
        record_retrieval(run, cell, &r);
        Ok(r)
    })
}

/// Retrieval after aligning `source` encoder outputs onto `target` ones by
/// a similarity transform fitted on the training participants.
pub fn procrustes_stage(
    cfg: &ExperimentConfig,
    data: &Dataset,
    cell: &str,
    source: &EncoderBundle,
    target: &EncoderBundle,
    run: &mut Run,
) -> Result<RetrievalReport> {
    stage(&format!("procrustes {cell}"), || {
        let train = data.train_indices();
        let fit = procrustes_align(&source.embed(data, &train, false)?, &target.embed(data, &train, false)?)?;
        run.record(cell, "procrustes_scale", fit.scale);
        run.record(cell, "procrustes_degenerate", fit.degenerate as f64);
        let test = data.test_indices();
        let q = fit.apply(&source.embed(data, &test, false)?)?;
        let c = target.embed(data, &test, false)?;
        let pids: Vec<u32> = test.iter().map(|&i| data.segments[i].participant_id).collect();
        let e = &cfg.eval;
        let mut r = bootstrap_retrieval(&q, &c, &pids, e.pool_participants, e.n_pools, stage_seed(cfg.seed, 200))?;
        r.embedding_space = "encoder".into();
        record_retrieval(run, cell, &r);
        Ok(r)
    })
}

/// Analytic chance level for pools of `pool_size` candidates.
pub fn record_chance(run: &mut Run, pool_size: f64) {
    run.record("chance", "top1_percent", 100.0 / pool_size);
    run.record("chance", "mean_rank", (pool_size + 1.0) / 2.0);
    run.record("chance", "pool_size", pool_size);
}

fn frozen_distill(cfg: &ExperimentConfig) -> DistillConfig {
    DistillConfig { freeze_teacher: true, teacher_ckpt: None, ..cfg.distill.clone() }
}

/// Executes a named recipe under `cfg.out_dir/<name>` and returns its
/// manifest. Any failing stage aborts the recipe and names the stage.
pub fn run_recipe(name: &str, cfg: &ExperimentConfig) -> Result<RunManifest> {
    if !RECIPES.contains(&name) {
        return Err(CoreError::InvalidArgument(format!("unknown recipe `{name}` (expected one of {})", RECIPES.join(", "))));
    }
    cfg.validate(crate::experiment::Purpose::General)?;
    let dir = cfg.out_dir.join(name);
    let mut run = Run::start(cfg, &format!("recipe {name}"), dir.clone())?;
    let data = stage("synth-data", || acquire_dataset(cfg))?;
    match name {
        "label-sweep" => label_sweep(cfg, &data, &dir, &mut run)?,
        "retrieval" => retrieval_table(cfg, &data, &dir, &mut run)?,
        "compression" => compression(cfg, &data, &dir, &mut run)?,
        "ablate-lambda" => ablate_lambda(cfg, &data, &dir, &mut run)?,
        "ablate-teacher" => ablate_teacher(cfg, &data, &dir, &mut run)?,
        "ablate-augment" => ablate_augment(cfg, &data, &dir, &mut run)?,
        _ => unreachable!("checked above"),
    }
    run.finish()
}

fn sub(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn label_sweep(cfg: &ExperimentConfig, data: &Dataset, dir: &Path, run: &mut Run) -> Result<()> {
    let teacher = pretrain_mae_stage(cfg, data, Modality::Ppg, &sub(dir, "ppg-mae"), run)?;
    let baseline = pretrain_mae_stage(cfg, data, Modality::Accel, &sub(dir, "accel-mae"), run)?;
    let kd = distill_stage("accel-kd", &frozen_distill(cfg), &cfg.augment, data, &teacher, stage_seed(cfg.seed, 10), &sub(dir, "accel-kd"), run)?;
    let untrained = untrained_student(cfg, None, stage_seed(cfg.seed, 11))?;
    for (model, bundle) in [("ppg-mae", &teacher), ("accel-mae", &baseline), ("accel-kd", &kd.student), ("accel-untrained", &untrained)] {
        probe_stage(cfg, data, model, bundle, &SWEEP_FRACTIONS, run)?;
    }
    for &target in &cfg.eval.targets {
        let granularity = if target.is_binary() { Granularity::Participant } else { cfg.eval.granularity };
        for &f in &SWEEP_FRACTIONS {
            let cell = probe_cell_name("accel-supervised", target, granularity, f);
            let out = stage(&format!("supervised {cell}"), || {
                supervised_baseline(
                    data,
                    Modality::Accel,
                    &cfg.encoder_for(Modality::Accel),
                    &cfg.eval.supervised,
                    target,
                    granularity,
                    f,
                    stage_seed(cfg.seed, 12),
                )
            })?;
            record_probe(run, &cell, &out.report);
        }
    }
    Ok(())
}

fn retrieval_table(cfg: &ExperimentConfig, data: &Dataset, dir: &Path, run: &mut Run) -> Result<()> {
    let teacher = pretrain_mae_stage(cfg, data, Modality::Ppg, &sub(dir, "ppg-mae"), run)?;
    let baseline = pretrain_mae_stage(cfg, data, Modality::Accel, &sub(dir, "accel-mae"), run)?;
    let kd = distill_stage("accel-kd", &frozen_distill(cfg), &cfg.augment, data, &teacher, stage_seed(cfg.seed, 10), &sub(dir, "accel-kd"), run)?;
    let r = retrieval_stage(cfg, data, "accel-kd", &kd.student, &kd.teacher, run)?;
    record_chance(run, r.pool_size);
    let untrained = untrained_student(cfg, None, stage_seed(cfg.seed, 11))?;
    retrieval_stage(cfg, data, "accel-untrained", &untrained, &kd.teacher, run)?;
    procrustes_stage(cfg, data, "accel-mae-procrustes", &baseline, &teacher, run)?;
    Ok(())
}

fn compression(cfg: &ExperimentConfig, data: &Dataset, dir: &Path, run: &mut Run) -> Result<()> {
    let teacher = pretrain_mae_stage(cfg, data, Modality::Ppg, &sub(dir, "ppg-mae"), run)?;
    for tag in SizeTag::ALL {
        let name = format!("accel-kd-{tag:?}");
        let student_cfg = EncoderSection::preset(tag).for_modality(Modality::Accel, &cfg.data.synth);
        run.record(&name, "params", param_count(&student_cfg)? as f64);
        let dcfg = DistillConfig { student: Some(student_cfg), ..frozen_distill(cfg) };
        let kd = distill_stage(&name, &dcfg, &cfg.augment, data, &teacher, stage_seed(cfg.seed, 20), &sub(dir, &name), run)?;
        probe_stage(cfg, data, &name, &kd.student, &[1.0], run)?;
        let untrained = untrained_student(cfg, Some(tag), stage_seed(cfg.seed, 21))?;
        probe_stage(cfg, data, &format!("accel-untrained-{tag:?}"), &untrained, &[1.0], run)?;
    }
    Ok(())
}

fn ablate_lambda(cfg: &ExperimentConfig, data: &Dataset, dir: &Path, run: &mut Run) -> Result<()> {
    let teacher = pretrain_mae_stage(cfg, data, Modality::Ppg, &sub(dir, "ppg-mae"), run)?;
    for lambda in LAMBDA_GRID {
        let name = format!("accel-kd-lambda-{lambda}");
        let dcfg = DistillConfig { lambda, ..frozen_distill(cfg) };
        let kd = distill_stage(&name, &dcfg, &cfg.augment, data, &teacher, stage_seed(cfg.seed, 30), &sub(dir, &name), run)?;
        probe_stage(cfg, data, &name, &kd.student, &[1.0], run)?;
        retrieval_stage(cfg, data, &name, &kd.student, &kd.teacher, run)?;
    }
    Ok(())
}

/// Frozen pretrained teacher against teachers trained jointly with the
/// student, from pretrained weights and from scratch.
fn ablate_teacher(cfg: &ExperimentConfig, data: &Dataset, dir: &Path, run: &mut Run) -> Result<()> {
    let teacher = pretrain_mae_stage(cfg, data, Modality::Ppg, &sub(dir, "ppg-mae"), run)?;
    let variants = [
        ("accel-kd-frozen", true, TeacherInit::Pretrained),
        ("accel-kd-unfrozen-pretrained", false, TeacherInit::Pretrained),
        ("accel-kd-unfrozen-random", false, TeacherInit::Random),
    ];
    for (name, freeze, init) in variants {
        let dcfg = DistillConfig { freeze_teacher: freeze, teacher_init: init, ..frozen_distill(cfg) };
        let kd = distill_stage(name, &dcfg, &cfg.augment, data, &teacher, stage_seed(cfg.seed, 40), &sub(dir, name), run)?;
        probe_stage(cfg, data, name, &kd.student, &[1.0], run)?;
        retrieval_stage(cfg, data, name, &kd.student, &kd.teacher, run)?;
    }
    Ok(())
}

fn ablate_augment(cfg: &ExperimentConfig, data: &Dataset, dir: &Path, run: &mut Run) -> Result<()> {
    let teacher = pretrain_mae_stage(cfg, data, Modality::Ppg, &sub(dir, "ppg-mae"), run)?;
    for (name, augment) in [("accel-kd-augment", cfg.augment.clone()), ("accel-kd-no-augment", AugmentConfig::disabled())] {
        let kd = distill_stage(name, &frozen_distill(cfg), &augment, data, &teacher, stage_seed(cfg.seed, 50), &sub(dir, name), run)?;
        probe_stage(cfg, data, name, &kd.student, &[1.0], run)?;
        retrieval_stage(cfg, data, name, &kd.student, &kd.teacher, run)?;
    }
    Ok(())
}
