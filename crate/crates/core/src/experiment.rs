//! Experiment configuration, run directories and their manifests, and the
//! export of finished runs into flat tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::cl::ClConfig;
use crate::dataset::{write_atomic, Dataset, MANIFEST_FILE};
use crate::distill::DistillConfig;
use crate::encoder::{EncoderConfig, SizeTag};
use crate::error::{CoreError, Result};
use crate::eval::{Granularity, Target};
use crate::mae::MaeConfig;
use crate::model::Modality;
use crate::supervised::SupervisedConfig;
use crate::synth::SynthConfig;
use crate::train::OptimConfig;

/// Encoder shape shared by every model of an experiment. Channel count,
/// sample rate and segment length follow from the modality and the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub size: SizeTag,
    pub token_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub patch_window_s: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self::from_config(&EncoderConfig::tiny(1))
    }
}

impl EncoderSection {
    pub fn from_config(c: &EncoderConfig) -> Self {
        Self {
            size: c.size,
            token_dim: c.token_dim,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            mlp_hidden: c.mlp_hidden,
            patch_window_s: c.patch_window_s,
        }
    }

    pub fn preset(size: SizeTag) -> Self {
        Self::from_config(&EncoderConfig::preset(size, 1))
    }

    pub fn for_modality(&self, modality: Modality, data: &SynthConfig) -> EncoderConfig {
        EncoderConfig {
            size: self.size,
            token_dim: self.token_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            mlp_hidden: self.mlp_hidden,
            patch_window_s: self.patch_window_s,
            input_channels: modality.channels(),
            input_rate_hz: data.out_rate_hz,
            segment_s: data.duration_s,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; generated from `synth` when absent or stale.
    pub dir: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSpace {
    Encoder,
    Projected,
}

impl EmbeddingSpace {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(EmbeddingSpace::Encoder),
            "projected" => Ok(EmbeddingSpace::Projected),
            _ => Err(CoreError::InvalidArgument(format!("unknown embedding space `{s}` (expected encoder or projected)"))),
        }
    }

    pub fn projected(self) -> bool {
        self == EmbeddingSpace::Projected
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub space: EmbeddingSpace,
    pub pool_participants: usize,
    pub n_pools: usize,
    pub targets: Vec<Target>,
    pub granularity: Granularity,
    pub supervised: SupervisedConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            space: EmbeddingSpace::Projected,
            pool_participants: 20,
            n_pools: 100,
            targets: vec![Target::Hr],
            granularity: Granularity::Segment,
            supervised: SupervisedConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_participants == 0 || self.n_pools == 0 {
            return Err(CoreError::Config("pool_participants and n_pools must be positive".into()));
        }
        if self.targets.is_empty() {
            return Err(CoreError::Config("targets must name at least one probe target".into()));
        }
        self.supervised.optim.validate()
    }
}

/// One experiment, as a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderSection,
    pub mae: MaeConfig,
    pub cl: ClConfig,
    pub distill: DistillConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            encoder: EncoderSection::default(),
            mae: MaeConfig::default(),
            cl: ClConfig::default(),
            distill: DistillConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Which command a configuration is checked for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    General,
    /// Stand-alone distillation needs an existing teacher checkpoint.
    Distill,
}

/// A validation failure located in the source document (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigIssue {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.column, self.message)
    }
}

impl ExperimentConfig {
    /// Settings sized for a laptop CPU: the small encoder, batches of 32 and
    /// a warmup scaled to the shortened runs. The loss-level
    /// hyperparameters stay at their published values.
    pub fn desk() -> Self {
        let optim = |lr: f64| OptimConfig { steps: 3000, batch_size: 32, max_lr: lr, warmup_iters: 300, ..OptimConfig::default() };
        Self {
            mae: MaeConfig { decoder_layers: 2, optim: optim(1e-3), ..MaeConfig::default() },
            cl: ClConfig { optim: optim(1e-3), ..ClConfig::default() },
            distill: DistillConfig { optim: optim(1e-3), ..DistillConfig::default() },
            eval: EvalConfig {
                supervised: SupervisedConfig { optim: OptimConfig { steps: 1500, ..optim(1e-3) } },
                ..EvalConfig::default()
            },
            ..Self::default()
        }
    }

    /// Section-level checks as `(json path, message)` pairs.
    pub fn problems(&self, purpose: Purpose) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut check = |path: &str, r: Result<()>| {
            if let Err(e) = r {
                out.push((path.to_string(), e.to_string()));
            }
        };
        check("data.synth", self.data.synth.validate());
        let ppg = self.encoder.for_modality(Modality::Ppg, &self.data.synth);
        check("encoder", ppg.validate());
        check("mae", self.mae.validate());
        check("cl", self.cl.validate());
        check("distill", self.distill.validate());
        check("augment", self.augment.validate());
        check("eval", self.eval.validate());
        if purpose == Purpose::Distill {
            match &self.distill.teacher_ckpt {
                None => out.push(("distill".into(), "distillation needs distill.teacher_ckpt".into())),
                Some(p) if !p.exists() => {
                    out.push(("distill.teacher_ckpt".into(), format!("teacher checkpoint {} does not exist", p.display())))
                }
                Some(_) => {}
            }
        }
        out
    }

    pub fn validate(&self, purpose: Purpose) -> Result<()> {
        match self.problems(purpose).into_iter().next() {
            None => Ok(()),
            Some((path, msg)) => Err(CoreError::Config(format!("{path}: {msg}"))),
        }
    }

    pub fn from_json(text: &str, purpose: Purpose) -> std::result::Result<Self, Vec<ConfigIssue>> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| vec![ConfigIssue { line: e.line(), column: e.column(), message: e.to_string() }])?;
        let issues: Vec<ConfigIssue> = cfg
            .problems(purpose)
            .into_iter()
            .map(|(path, message)| {
                let (line, column) = locate(text, &path, &message);
                ConfigIssue { line, column, message: format!("{path}: {message}") }
            })
            .collect();
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(issues)
        }
    }

    /// Reads and validates a config file; issues are folded into one
    /// config error.
    pub fn load(path: &Path, purpose: Purpose) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_json(&text, purpose).map_err(|issues| {
            let lines: Vec<String> = issues.iter().map(|i| format!("{}:{i}", path.display())).collect();
            CoreError::Config(lines.join("\n"))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(compact.as_bytes()))
    }

    pub fn encoder_for(&self, modality: Modality) -> EncoderConfig {
        self.encoder.for_modality(modality, &self.data.synth)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Line and column (1-based) of the key most likely responsible for a
/// semantic error: the deepest key of `path`, refined by the first
/// word of `message` that is itself a key inside that section.
fn locate(text: &str, path: &str, message: &str) -> (usize, usize) {
    let mut pos = None;
    let mut from = 0;
    for part in path.split('.') {
        match find_key(text, part, from) {
            Some(p) => {
                pos = Some(p);
                from = p + part.len() + 2;
            }
            None => break,
        }
    }
    let Some(section) = pos else { return (1, 1) };
    let refined = message
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| w.len() > 1)
        .find_map(|w| find_key(text, w, from).filter(|&p| p < section_end(text, section)));
    line_col(text, refined.unwrap_or(section))
}

/// Offset of `"key"` used as an object key at or after `from`.
fn find_key(text: &str, key: &str, from: usize) -> Option<usize> {
    let needle = format!("\"{key}\"");
    let mut start = from;
    while let Some(off) = text.get(start..)?.find(&needle) {
        let at = start + off;
        if text[at + needle.len()..].trim_start().starts_with(':') {
            return Some(at);
        }
        start = at + needle.len();
    }
    None
}

/// End of the JSON value that follows the key at `key_pos`.
fn section_end(text: &str, key_pos: usize) -> usize {
    let bytes = text.as_bytes();
    let Some(open) = text[key_pos..].find(['{', '[']).map(|o| key_pos + o) else { return text.len() };
    let mut depth = 0i32;
    let mut in_str = false;
    let mut i = open;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' if in_str => i += 1,
            b'"' => in_str = !in_str,
            b'{' | b'[' if !in_str => depth += 1,
            b'}' | b']' if !in_str => {
                depth -= 1;
                if depth == 0 {
                    return i;
                }
            }
            _ => {}
        }
        i += 1;
    }
    text.len()
}

fn line_col(text: &str, pos: usize) -> (usize, usize) {
    let before = &text[..pos];
    let line = before.matches('\n').count() + 1;
    let column = pos - before.rfind('\n').map_or(0, |n| n + 1) + 1;
    (line, column)
}

/// Loads the dataset named by the config, generating (and caching) it when
/// the directory is missing or was built from different settings. The
/// returned data always comes from disk so that fresh and cached runs see
/// identical bytes.
pub fn acquire_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.data.dir.clone().unwrap_or_else(|| cfg.out_dir.join("data"));
    if dir.join(MANIFEST_FILE).exists() {
        let data = Dataset::load(&dir)?;
        if data.manifest.config == cfg.data.synth {
            return Ok(data);
        }
        log::info!("dataset at {} was built from other settings; regenerating", dir.display());
    }
    log::info!("generating {} x {} segments into {}", cfg.data.synth.participants, cfg.data.synth.segments, dir.display());
    Dataset::generate(&cfg.data.synth)?.save(&dir)?;
    Dataset::load(&dir)
}

// ---------------------------------------------------------------- runs

/// One scalar result: `cell` names the model/setting, `metric` the quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub cell: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
    pub artifacts: Vec<String>,
    /// `cell/metric -> value`.
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

pub const RUN_MANIFEST: &str = "manifest.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CONFIG_ECHO: &str = "config.json";

/// `v<crate version>` plus `git describe` output when available.
pub fn version_string() -> String {
    let base = concat!("v", env!("CARGO_PKG_VERSION"));
    let described = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) => format!("{base}-{d}"),
        None => base.to_string(),
    }
}

/// A run directory being filled. [`Run::finish`] writes `metrics.csv` and
/// `manifest.json`; the resolved config is echoed at start.
pub struct Run {
    pub dir: PathBuf,
    command: String,
    config_hash: String,
    seed: u64,
    started: Instant,
    started_unix_s: u64,
    rows: Vec<MetricRow>,
    artifacts: Vec<PathBuf>,
    notes: Vec<String>,
}

impl Run {
    pub fn start(cfg: &ExperimentConfig, command: &str, dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
        write_atomic(&dir.join(CONFIG_ECHO), cfg.to_json().as_bytes())?;
        let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Ok(Self {
            dir,
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            started: Instant::now(),
            started_unix_s,
            rows: Vec::new(),
            artifacts: Vec::new(),
            notes: Vec::new(),
        })
    }

    pub fn record(&mut self, cell: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow { cell: cell.to_string(), metric: metric.to_string(), value });
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn note(&mut self, note: impl Into<String>) {
        let note = note.into();
        log::info!("{note}");
        self.notes.push(note);
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn finish(self) -> Result<RunManifest> {
        let mut csv = String::from("cell,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(csv, "{},{},{}", csv_field(&r.cell), csv_field(&r.metric), r.value);
        }
        write_atomic(&self.dir.join(METRICS_CSV), csv.as_bytes())?;
        let rel = |p: &Path| p.strip_prefix(&self.dir).unwrap_or(p).display().to_string();
        let mut artifacts: Vec<String> = self.artifacts.iter().map(|p| rel(p)).collect();
        artifacts.push(METRICS_CSV.into());
        artifacts.push(CONFIG_ECHO.into());
        let manifest = RunManifest {
            version: version_string(),
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            deterministic: bcg_tensor::is_deterministic(),
            started_unix_s: self.started_unix_s,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            artifacts,
            metrics: self.rows.iter().map(|r| (format!("{}/{}", r.cell, r.metric), r.value)).collect(),
            notes: self.notes,
        };
        let path = self.dir.join(RUN_MANIFEST);
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CoreError::json(&path, e))?;
        write_atomic(&path, &json)?;
        Ok(manifest)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = run_dir.join(RUN_MANIFEST);
    let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CoreError::json(&path, e))
}

/// Combined table of several runs: one row per run, one column per metric
/// key (sorted), empty cells where a run lacks a metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExportTable {
    pub columns: Vec<String>,
    pub rows: Vec<ExportRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExportRow {
    pub run: String,
    pub command: String,
    pub config_hash: String,
    pub values: BTreeMap<String, f64>,
}

pub fn export_results(run_dirs: &[PathBuf]) -> Result<ExportTable> {
    let mut rows = Vec::new();
    let mut keys = BTreeSet::new();
    for dir in run_dirs {
        let m = read_manifest(dir)?;
        keys.extend(m.metrics.keys().cloned());
        rows.push(ExportRow { run: dir.display().to_string(), command: m.command, config_hash: m.config_hash, values: m.metrics });
    }
    Ok(ExportTable { columns: keys.into_iter().collect(), rows })
}

impl ExportTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,command,config_hash");
        for c in &self.columns {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", csv_field(&r.run), csv_field(&r.command), r.config_hash);
            for c in &self.columns {
                out.push(',');
                if let Some(v) = r.values.get(c) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
        let csv = stem.with_extension("csv");
        let json = stem.with_extension("json");
        write_atomic(&csv, self.to_csv().as_bytes())?;
        let body = serde_json::to_vec_pretty(self).map_err(|e| CoreError::json(&json, e))?;
        write_atomic(&json, &body)?;
        Ok((csv, json))
    }
}
