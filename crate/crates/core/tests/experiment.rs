use std::path::Path;

use bcg_core::encoder::SizeTag;
use bcg_core::experiment::*;
use bcg_core::pipeline::{run_recipe, RECIPES};
use bcg_core::train::OptimConfig;
use bcg_core::CoreError;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed: 3, out_dir: out.join("runs"), ..ExperimentConfig::default() };
    cfg.data.dir = Some(out.join("data"));
    cfg.data.synth.participants = 10;
    cfg.data.synth.segments = 4;
    cfg.data.synth.duration_s = 5.0;
    cfg.encoder = EncoderSection { token_dim: 8, n_layers: 1, n_heads: 2, mlp_hidden: 16, ..EncoderSection::default() };
    let optim = OptimConfig { steps: 3, batch_size: 4, max_lr: 1e-3, warmup_iters: 1, ..OptimConfig::default() };
    cfg.mae.optim = optim.clone();
    cfg.mae.decoder_layers = 1;
    cfg.distill.optim = optim.clone();
    cfg.distill.head_hidden = 16;
    cfg.distill.head_out = 8;
    cfg.eval.pool_participants = 2;
    cfg.eval.n_pools = 3;
    cfg.eval.supervised.optim = optim;
    cfg
}

#[test]
fn default_and_desk_configs_validate_and_round_trip() {
    for cfg in [ExperimentConfig::default(), ExperimentConfig::desk()] {
        cfg.validate(Purpose::General).unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json(), Purpose::General).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
    let desk = ExperimentConfig::desk();
    assert_eq!(desk.encoder.size, SizeTag::Custom);
    assert_eq!(desk.distill.lambda, 1.0);
    assert_eq!(desk.distill.temperature, 0.04);
    assert_ne!(ExperimentConfig { seed: 1, ..desk.clone() }.hash(), desk.hash());
}

#[test]
fn partial_documents_fill_in_defaults() {
    let cfg = ExperimentConfig::from_json(r#"{ "seed": 9, "distill": { "lambda": 0.5 } }"#, Purpose::General).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.distill.lambda, 0.5);
    assert_eq!(cfg.distill.temperature, 0.04);
}

#[test]
fn unknown_key_is_reported_with_its_position() {
    let text = "{\n  \"seed\": 1,\n  \"distill\": {\n    \"lamda\": 0.5\n  }\n}\n";
    let issues = ExperimentConfig::from_json(text, Purpose::General).unwrap_err();
    assert_eq!(issues.len(), 1);
    assert_eq!(issues[0].line, 4, "{}", issues[0]);
    assert!(issues[0].message.contains("lamda"));
}

#[test]
fn out_of_range_lambda_points_at_its_line() {
    let text = "{\n  \"seed\": 1,\n  \"distill\": {\n    \"temperature\": 0.04,\n    \"lambda\": 1.5\n  }\n}\n";
    let issues = ExperimentConfig::from_json(text, Purpose::General).unwrap_err();
    assert_eq!(issues.len(), 1);
    assert_eq!((issues[0].line, issues[0].column), (5, 5), "{}", issues[0]);
    assert!(issues[0].message.contains("lambda"));
    assert!(matches!(ExperimentConfig::desk().validate(Purpose::General), Ok(())));
}

#[test]
fn distillation_needs_an_existing_teacher_checkpoint() {
    let cfg = ExperimentConfig::default();
    assert!(cfg.validate(Purpose::General).is_ok());
    assert!(matches!(cfg.validate(Purpose::Distill), Err(CoreError::Config(_))));
    let text = "{\n  \"distill\": {\n    \"teacher_ckpt\": \"/nonexistent/teacher.bsdk\"\n  }\n}\n";
    let issues = ExperimentConfig::from_json(text, Purpose::Distill).unwrap_err();
    assert_eq!(issues[0].line, 3);
    assert!(issues[0].message.contains("does not exist"));
}

#[test]
fn load_folds_issues_into_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ \"eval\": { \"n_pools\": 0 } }").unwrap();
    match ExperimentConfig::load(&path, Purpose::General) {
        Err(CoreError::Config(msg)) => assert!(msg.contains("bad.json:line 1") && msg.contains("n_pools"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn run_writes_manifest_metrics_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let mut run = Run::start(&cfg, "unit", dir.path().join("r")).unwrap();
    run.record("model/hr", "mae", 4.5);
    run.record("chance", "top1_percent", 0.25);
    run.note("something skipped");
    let m = run.finish().unwrap();
    assert_eq!(m.config_hash, cfg.hash());
    assert_eq!(m.metrics["model/hr/mae"], 4.5);
    assert_eq!(read_manifest(&dir.path().join("r")).unwrap(), m);
    let csv = std::fs::read_to_string(dir.path().join("r").join(METRICS_CSV)).unwrap();
    assert_eq!(csv, "cell,metric,value\nmodel/hr,mae,4.5\nchance,top1_percent,0.25\n");
    let echo = std::fs::read_to_string(dir.path().join("r").join(CONFIG_ECHO)).unwrap();
    assert_eq!(ExperimentConfig::from_json(&echo, Purpose::General).unwrap(), cfg);
}

#[test]
fn export_unions_columns_and_leaves_gaps_empty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let mut a = Run::start(&cfg, "first", dir.path().join("a")).unwrap();
    a.record("m", "x", 1.0);
    a.record("m", "y", 2.0);
    a.finish().unwrap();
    let mut b = Run::start(&cfg, "second", dir.path().join("b")).unwrap();
    b.record("m", "y", 3.0);
    b.record("n", "z", 4.0);
    b.finish().unwrap();
    let table = export_results(&[dir.path().join("a"), dir.path().join("b")]).unwrap();
    assert_eq!(table.columns, ["m/x", "m/y", "n/z"]);
    let csv = table.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "run,command,config_hash,m/x,m/y,n/z");
    assert!(lines[1].ends_with(",1,2,"), "{}", lines[1]);
    assert!(lines[2].ends_with(",,3,4"), "{}", lines[2]);
    let (c, j) = table.write(&dir.path().join("out").join("table")).unwrap();
    assert!(c.exists() && j.exists());
    assert!(export_results(&[dir.path().join("missing")]).is_err());
}

#[test]
fn unknown_recipe_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    match run_recipe("label_sweep", &tiny(dir.path())) {
        Err(CoreError::InvalidArgument(msg)) => assert!(msg.contains("label-sweep")),
        other => panic!("expected an invalid-argument error, got {other:?}"),
    }
}

#[test]
fn retrieval_recipe_records_every_cell_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let m = run_recipe("retrieval", &cfg).unwrap();
    for key in ["chance/top1_percent", "accel-kd/top1_percent", "accel-untrained/mean_rank", "accel-mae-procrustes/procrustes_scale", "ppg-mae/loss_last50"]
    {
        assert!(m.metrics.contains_key(key), "missing {key}");
    }
    let run_dir = cfg.out_dir.join("retrieval");
    assert!(run_dir.join("accel-kd").join("ckpt").join("student.bsdk").exists());
    let first = std::fs::read(run_dir.join(METRICS_CSV)).unwrap();
    // Second run reuses the cached dataset and must agree exactly.
    run_recipe("retrieval", &cfg).unwrap();
    assert_eq!(std::fs::read(run_dir.join(METRICS_CSV)).unwrap(), first);
}

#[test]
fn failing_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.eval.pool_participants = 50;
    match run_recipe("ablate-augment", &cfg) {
        Err(CoreError::Stage { stage, .. }) => assert!(stage.starts_with("retrieval"), "{stage}"),
        other => panic!("expected a stage error, got {other:?}"),
    }
}

#[test]
fn every_recipe_runs_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.eval.targets = vec![bcg_core::eval::Target::Hr, bcg_core::eval::Target::Trait];
    for name in RECIPES.iter().filter(|&&n| n != "compression") {
        let m = run_recipe(name, &cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!m.metrics.is_empty(), "{name}");
        assert!(m.metrics.values().all(|v| v.is_finite()), "{name}");
    }
}
