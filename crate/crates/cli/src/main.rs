//! `bcg`: drives data synthesis, pre-training, distillation, evaluation
//! and the canned experiment recipes from a single JSON config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bcg_core::augment::AugmentConfig;
use bcg_core::distill::{train_distill_from_ckpt, TeacherInit};
use bcg_core::eval::{cross_modal_retrieval, probe, Granularity, Target};
use bcg_core::experiment::{acquire_dataset, export_results, EmbeddingSpace, ExperimentConfig, Purpose, Run};
use bcg_core::model::{EncoderBundle, Modality};
use bcg_core::pipeline::{
    pretrain_cl_stage, pretrain_mae_stage, probe_cell_name, record_chance, record_probe, record_retrieval, run_recipe, stage,
    stage_seed,
};
use bcg_core::supervised::supervised_baseline;
use bcg_core::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bcg", version, about = "Cross-modal distillation from PPG to accelerometry on synthetic wearable data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the laptop-sized preset instead of the plain defaults
    /// (ignored with --config).
    #[arg(long, global = true)]
    desk: bool,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or reuse) the synthetic paired dataset.
    SynthData,
    /// Masked-autoencoder pre-training of one modality.
    PretrainMae {
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
    },
    /// Contrastive pre-training of one modality.
    PretrainCl {
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        augment: Switch,
    },
    /// Distil an accelerometry student from a PPG teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher_ckpt: Option<PathBuf>,
        /// Train the teacher along with the student.
        #[arg(long)]
        unfrozen: bool,
        /// Initialisation of an unfrozen teacher: pretrained or random.
        #[arg(long, value_parser = parse_teacher_init)]
        teacher_init: Option<TeacherInit>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        augment: Switch,
    },
    /// Cross-modal retrieval on the held-out participants.
    EvalRetrieval {
        #[arg(long)]
        query_ckpt: PathBuf,
        #[arg(long)]
        key_ckpt: PathBuf,
        #[arg(long, value_parser = parse_space)]
        space: Option<EmbeddingSpace>,
        #[arg(long)]
        pools: Option<usize>,
        #[arg(long)]
        pool_participants: Option<usize>,
    },
    /// Ridge probe on a frozen encoder.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        task: Task,
    },
    /// Train an accelerometry encoder end to end on the labels.
    Supervised {
        #[command(flatten)]
        task: Task,
    },
    /// Run a named experiment recipe.
    Recipe {
        /// label-sweep, retrieval, compression, ablate-lambda, ablate-teacher or ablate-augment.
        name: String,
    },
    /// Merge finished run directories into one CSV and JSON table.
    Export {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output stem; `.csv` and `.json` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective config (defaults, preset and overrides applied).
    ShowConfig,
    /// Check a config without running anything.
    ValidateConfig {
        /// Also require what stand-alone distillation needs.
        #[arg(long = "for", value_enum, default_value_t = For::General)]
        purpose: For,
    },
}

#[derive(Args, Debug)]
struct Task {
    #[arg(long, value_parser = parse_target, default_value = "hr")]
    target: Target,
    #[arg(long, value_parser = parse_granularity, default_value = "segment")]
    granularity: Granularity,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum For {
    General,
    Distill,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    Modality::parse(s).map_err(|e| e.to_string())
}

fn parse_teacher_init(s: &str) -> Result<TeacherInit, String> {
    TeacherInit::parse(s).map_err(|e| e.to_string())
}

fn parse_space(s: &str) -> Result<EmbeddingSpace, String> {
    EmbeddingSpace::parse(s).map_err(|e| e.to_string())
}

fn parse_target(s: &str) -> Result<Target, String> {
    Target::parse(s).map_err(|e| e.to_string())
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    Granularity::parse(s).map_err(|e| e.to_string())
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if bcg_tensor::deterministic_from_env() {
        log::info!("deterministic kernels enabled");
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(EXIT_NUMERIC)
            } else if e.is_config() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn load_config(common: &Common, purpose: Purpose) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path, Purpose::General)?,
        None if common.desk => ExperimentConfig::desk(),
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate(purpose)?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn augment_for(cfg: &ExperimentConfig, switch: Switch) -> AugmentConfig {
    match switch {
        Switch::On => cfg.augment.clone(),
        Switch::Off => AugmentConfig::disabled(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::ValidateConfig { purpose } => {
            let purpose = match purpose {
                For::General => Purpose::General,
                For::Distill => Purpose::Distill,
            };
            let cfg = load_config(common, purpose)?;
            println!("config ok (hash {})", cfg.hash());
            Ok(())
        }
        Command::ShowConfig => {
            println!("{}", load_config(common, Purpose::General)?.to_json());
            Ok(())
        }
        Command::Export { runs, out } => {
            let table = export_results(&runs)?;
            let (csv, json) = table.write(&out)?;
            println!("{} runs, {} columns -> {} and {}", table.rows.len(), table.columns.len(), csv.display(), json.display());
            Ok(())
        }
        Command::Recipe { name } => {
            let cfg = load_config(common, Purpose::General)?;
            let m = run_recipe(&name, &cfg)?;
            println!("{} metrics in {:.1}s under {}", m.metrics.len(), m.wall_clock_s, cfg.out_dir.join(&name).display());
            Ok(())
        }
        Command::SynthData => {
            let cfg = load_config(common, Purpose::General)?;
            let data = acquire_dataset(&cfg)?;
            let dir = cfg.data.dir.clone().unwrap_or_else(|| cfg.out_dir.join("data"));
            println!(
                "{} segments from {} participants ({} train, {} test) in {}",
                data.segments.len(),
                cfg.data.synth.participants,
                data.train_indices().len(),
                data.test_indices().len(),
                dir.display()
            );
            Ok(())
        }
        Command::PretrainMae { modality } => {
            let cfg = load_config(common, Purpose::General)?;
            single_stage(&cfg, &format!("pretrain-mae-{}", modality.name()), |cfg, dir, run| {
                let data = stage("synth-data", || acquire_dataset(cfg))?;
                pretrain_mae_stage(cfg, &data, modality, dir, run).map(drop)
            })
        }
        Command::PretrainCl { modality, augment } => {
            let cfg = load_config(common, Purpose::General)?;
            single_stage(&cfg, &format!("pretrain-cl-{}", modality.name()), |cfg, dir, run| {
                let data = stage("synth-data", || acquire_dataset(cfg))?;
                pretrain_cl_stage(cfg, &data, modality, &augment_for(cfg, augment), dir, run).map(drop)
            })
        }
        Command::Distill { teacher_ckpt, unfrozen, teacher_init, lambda, augment } => {
            let mut cfg = load_config(common, Purpose::General)?;
            if let Some(p) = teacher_ckpt {
                cfg.distill.teacher_ckpt = Some(p);
            }
            cfg.distill.freeze_teacher &= !unfrozen;
            if let Some(init) = teacher_init {
                cfg.distill.teacher_init = init;
            }
            if let Some(l) = lambda {
                cfg.distill.lambda = l;
            }
            cfg.validate(Purpose::Distill)?;
            single_stage(&cfg, "distill", |cfg, dir, run| {
                let data = stage("synth-data", || acquire_dataset(cfg))?;
                let out = stage("distill", || {
                    train_distill_from_ckpt(&data, &cfg.distill, &augment_for(cfg, augment), stage_seed(cfg.seed, 10), Some(dir))
                })?;
                let (head, tail) = out.log.head_tail_mean(50);
                run.record("accel-kd", "loss_first50", head);
                run.record("accel-kd", "loss_last50", tail);
                run.artifact(&dir.join("ckpt").join("student.bsdk"));
                Ok(())
            })
        }
        Command::EvalRetrieval { query_ckpt, key_ckpt, space, pools, pool_participants } => {
            let mut cfg = load_config(common, Purpose::General)?;
            if let Some(s) = space {
                cfg.eval.space = s;
            }
            if let Some(n) = pools {
                cfg.eval.n_pools = n;
            }
            if let Some(n) = pool_participants {
                cfg.eval.pool_participants = n;
            }
            cfg.validate(Purpose::General)?;
            single_stage(&cfg, "eval-retrieval", |cfg, _, run| {
                let data = stage("synth-data", || acquire_dataset(cfg))?;
                let (q, k) = (EncoderBundle::load(&query_ckpt)?, EncoderBundle::load(&key_ckpt)?);
                let e = &cfg.eval;
                let r = stage("retrieval", || {
                    cross_modal_retrieval(&q, &k, &data, e.space.projected(), e.pool_participants, e.n_pools, stage_seed(cfg.seed, 200))
                })?;
                record_retrieval(run, "retrieval", &r);
                record_chance(run, r.pool_size);
                print_json(&r);
                Ok(())
            })
        }
        Command::Probe { ckpt, task } => {
            let cfg = load_config(common, Purpose::General)?;
            single_stage(&cfg, "probe", |cfg, _, run| {
                let data = stage("synth-data", || acquire_dataset(cfg))?;
                let bundle = EncoderBundle::load(&ckpt)?;
                let r = stage("probe", || probe(&bundle, &data, task.target, task.granularity, task.fraction, stage_seed(cfg.seed, 100)))?;
                record_probe(run, &probe_cell_name(&bundle.meta.method, task.target, task.granularity, task.fraction), &r);
                print_json(&r);
                Ok(())
            })
        }
        Command::Supervised { task } => {
            let cfg = load_config(common, Purpose::General)?;
            single_stage(&cfg, "supervised", |cfg, dir, run| {
                let data = stage("synth-data", || acquire_dataset(cfg))?;
                let out = stage("supervised", || {
                    supervised_baseline(
                        &data,
                        Modality::Accel,
                        &cfg.encoder_for(Modality::Accel),
                        &cfg.eval.supervised,
                        task.target,
                        task.granularity,
                        task.fraction,
                        stage_seed(cfg.seed, 12),
                    )
                })?;
                let path = dir.join("ckpt").join("encoder.bsdk");
                out.bundle.save(&path)?;
                run.artifact(&path);
                record_probe(run, &probe_cell_name("accel-supervised", task.target, task.granularity, task.fraction), &out.report);
                print_json(&out.report);
                Ok(())
            })
        }
    }
}

/// Runs one command inside its own run directory and writes the manifest.
fn single_stage(cfg: &ExperimentConfig, name: &str, body: impl FnOnce(&ExperimentConfig, &Path, &mut Run) -> Result<()>) -> Result<()> {
    let dir = cfg.out_dir.join(name);
    let mut run = Run::start(cfg, name, dir.clone())?;
    body(cfg, &dir, &mut run)?;
    let m = run.finish()?;
    println!("run {} finished in {:.1}s", dir.display(), m.wall_clock_s);
    Ok(())
}
