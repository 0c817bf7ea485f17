//! Run configuration, dataset resolution, output directories and manifests
//! behind the `dsne` command-line tool.
//!
//! A run directory holds:
//! - `config.json`: the fully resolved configuration
//! - `metrics.jsonl`: one [`MetricsRecord`] per epoch
//! - `checkpoint.bin`: final parameters (see [`crate::net::Checkpoint`])
//! - `split.json`: labeled and evaluation indices into the target dataset
//! - `manifest.json`: config, dataset digests, version and timing

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, Domain};
use crate::error::{Error, Result};
use crate::loss::LossMode;
use crate::mean_teacher::{self, SemiConfig};
use crate::net::{self, Arch};
use crate::sampler;
use crate::trainer::{self, MetricsRecord, Networks, TrainConfig, TrainData};

/// Environment variable naming the directory relative data paths resolve against.
pub const DATA_ROOT_ENV: &str = "DSNE_DATA_ROOT";

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => exit::USAGE,
        Error::Numeric(_) | Error::State(_) => exit::NUMERIC,
        Error::Io { .. }
        | Error::Format(_)
        | Error::Length { .. }
        | Error::Range(_)
        | Error::Shape(_)
        | Error::Label { .. }
        | Error::Domain(_)
        | Error::DegenerateBatch(_)
        | Error::Protocol(_) => exit::DATA,
    }
}

/// Where a dataset lives and how it is encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX image and label files.
    Mnist { images: PathBuf, labels: PathBuf },
    /// One or more USPS text files, concatenated in order.
    Usps { paths: Vec<PathBuf> },
}

impl FromStr for DatasetSpec {
    type Err = Error;

    /// `mnist:IMAGES,LABELS` or `usps:PATH[,PATH...]`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("dataset spec {s:?} lacks a `format:` prefix")))?;
        let parts: Vec<PathBuf> = rest.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
        match (kind, parts.as_slice()) {
            ("mnist", [images, labels]) => Ok(DatasetSpec::Mnist {
                images: images.clone(),
                labels: labels.clone(),
            }),
            ("usps", [_, ..]) => Ok(DatasetSpec::Usps { paths: parts }),
            _ => Err(Error::Config(format!(
                "dataset spec {s:?}: expected mnist:IMAGES,LABELS or usps:PATH[,PATH...]"
            ))),
        }
    }
}

impl DatasetSpec {
    pub fn files(&self) -> Vec<&Path> {
        match self {
            DatasetSpec::Mnist { images, labels } => vec![images.as_path(), labels.as_path()],
            DatasetSpec::Usps { paths } => paths.iter().map(PathBuf::as_path).collect(),
        }
    }

    fn resolved(&self, root: Option<&Path>) -> Self {
        let fix = |p: &PathBuf| match root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.clone(),
        };
        match self {
            DatasetSpec::Mnist { images, labels } => DatasetSpec::Mnist {
                images: fix(images),
                labels: fix(labels),
            },
            DatasetSpec::Usps { paths } => DatasetSpec::Usps {
                paths: paths.iter().map(fix).collect(),
            },
        }
    }

    /// Resolves relative paths against the data-root environment variable.
    pub fn resolve(&self) -> Self {
        let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        self.resolved(root.as_deref())
    }

    /// Loads, tags and resizes the dataset to `height × width`.
    pub fn load(&self, domain: Domain, height: usize, width: usize) -> Result<Dataset> {
        let ds = match self.resolve() {
            DatasetSpec::Mnist { images, labels } => data::load_mnist(&images, &labels, domain, "mnist")?,
            DatasetSpec::Usps { paths } => {
                let mut all: Option<Dataset> = None;
                for p in &paths {
                    let part = data::load_usps(p, domain, "usps")?;
                    all = Some(match all {
                        None => part,
                        Some(acc) => acc.concat(part)?,
                    });
                }
                all.ok_or_else(|| Error::Config("usps spec lists no files".into()))?
            }
        };
        ds.resized(height, width)
    }
}

fn d<T: Default>() -> T {
    T::default()
}

/// Everything a training run needs. Absent keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub source: DatasetSpec,
    pub target: DatasetSpec,
    /// Held-out source data for source accuracy (domain generalisation).
    #[serde(default)]
    pub source_test: Option<DatasetSpec>,
    #[serde(default = "RunConfig::default_name")]
    pub name: String,
    /// Parent directory of run directories.
    #[serde(default = "RunConfig::default_output_root")]
    pub output_root: PathBuf,
    #[serde(default = "RunConfig::default_shots")]
    pub shots: usize,
    #[serde(default = "RunConfig::default_source_samples")]
    pub source_samples: usize,
    #[serde(default = "RunConfig::default_seed")]
    pub seed: u64,
    #[serde(default = "RunConfig::default_alpha")]
    pub alpha: f64,
    #[serde(default = "RunConfig::default_beta")]
    pub beta: f64,
    #[serde(default = "RunConfig::default_margin")]
    pub margin: f64,
    #[serde(default = "RunConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "RunConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default = "RunConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "RunConfig::default_source_batch")]
    pub source_batch: usize,
    #[serde(default = "RunConfig::default_target_batch")]
    pub target_batch: usize,
    #[serde(default = "RunConfig::default_true")]
    pub shared_weights: bool,
    #[serde(default = "RunConfig::default_loss_mode")]
    pub loss_mode: LossMode,
    #[serde(default)]
    pub normalize_embeddings: bool,
    #[serde(default = "RunConfig::default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d")]
    pub arch: Arch,
    #[serde(default)]
    pub semi_supervised: bool,
    #[serde(default = "d")]
    pub semi: SemiConfig,
}

impl RunConfig {
    fn default_name() -> String {
        "run".into()
    }
    fn default_output_root() -> PathBuf {
        PathBuf::from("runs")
    }
    fn default_shots() -> usize {
        7
    }
    fn default_source_samples() -> usize {
        2000
    }
    fn default_seed() -> u64 {
        TrainConfig::default().seed
    }
    fn default_alpha() -> f64 {
        TrainConfig::default().alpha
    }
    fn default_beta() -> f64 {
        TrainConfig::default().beta
    }
    fn default_margin() -> f64 {
        TrainConfig::default().margin
    }
    fn default_lr() -> f64 {
        TrainConfig::default().lr
    }
    fn default_momentum() -> f64 {
        TrainConfig::default().momentum
    }
    fn default_epochs() -> usize {
        TrainConfig::default().epochs
    }
    fn default_source_batch() -> usize {
        TrainConfig::default().source_batch
    }
    fn default_target_batch() -> usize {
        TrainConfig::default().target_batch
    }
    fn default_true() -> bool {
        true
    }
    fn default_loss_mode() -> LossMode {
        LossMode::Hausdorff
    }
    fn default_eval_every() -> usize {
        TrainConfig::default().eval_every
    }

    /// Parses a JSON config; unknown keys and type errors are config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train_config().validate()?;
        if cfg.semi_supervised {
            cfg.semi.validate()?;
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            margin: self.margin,
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            source_batch: self.source_batch,
            target_batch: self.target_batch,
            seed: self.seed,
            shared_weights: self.shared_weights,
            loss_mode: self.loss_mode,
            normalize_embeddings: self.normalize_embeddings,
            eval_every: self.eval_every,
            arch: self.arch.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDigest {
    pub role: String,
    pub files: Vec<FileDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub datasets: Vec<DatasetDigest>,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

fn digests(cfg: &RunConfig) -> Result<Vec<DatasetDigest>> {
    let mut specs = vec![("source", &cfg.source), ("target", &cfg.target)];
    if let Some(t) = &cfg.source_test {
        specs.push(("source_test", t));
    }
    specs
        .into_iter()
        .map(|(role, spec)| {
            let files = spec
                .resolve()
                .files()
                .into_iter()
                .map(sha256_file)
                .collect::<Result<Vec<_>>>()?;
            Ok(DatasetDigest {
                role: role.to_string(),
                files,
            })
        })
        .collect()
}

/// Accepts either a plain config or a manifest from an earlier run. For a
/// manifest, dataset digests must still match.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if value.get("artifact_version").is_some() && value.get("config").is_some() {
        let manifest: Manifest = serde_json::from_value(value).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        let now = digests(&manifest.config)?;
        let strip = |v: &[DatasetDigest]| -> Vec<(String, Vec<String>)> {
            v.iter()
                .map(|d| (d.role.clone(), d.files.iter().map(|f| f.sha256.clone()).collect()))
                .collect()
        };
        if strip(&now) != strip(&manifest.datasets) {
            return Err(Error::Format("dataset files differ from the manifest digests".into()));
        }
        return RunConfig::from_json(&serde_json::to_string(&manifest.config).expect("serialisable"));
    }
    RunConfig::from_json(&text)
}

/// Creates `root/name`, or `root/name-1`, `root/name-2`, ... if taken.
pub fn fresh_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for k in 0.. {
        let dir = if k == 0 {
            root.join(name)
        } else {
            root.join(format!("{name}-{k}"))
        };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub shots: usize,
    pub seed: u64,
    pub labeled_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub history: Vec<MetricsRecord>,
    pub networks: Networks,
}

/// Datasets of one run, already subsampled and split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub source: Dataset,
    pub target: Dataset,
    pub split: sampler::FewShotSplit,
    pub source_test: Option<Dataset>,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let InputShapeHw { h, w } = InputShapeHw::of(&cfg.arch);
    let full_source = cfg.source.load(Domain::Source, h, w)?;
    let source = sampler::subsample_source(&full_source, cfg.source_samples, cfg.seed)?;
    let target = cfg.target.load(Domain::Target, h, w)?;
    let split = sampler::select_few_shot(&target, cfg.shots, cfg.seed)?;
    let source_test = cfg
        .source_test
        .as_ref()
        .map(|s| s.load(Domain::Source, h, w))
        .transpose()?;
    Ok(PreparedData {
        source,
        target,
        split,
        source_test,
    })
}

struct InputShapeHw {
    h: usize,
    w: usize,
}

impl InputShapeHw {
    fn of(arch: &Arch) -> Self {
        Self {
            h: arch.input.height,
            w: arch.input.width,
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Executes a configured run into a fresh directory under `cfg.output_root`.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    let started_unix_secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let datasets = digests(cfg)?;
    let data = prepare_data(cfg)?;
    let dir = fresh_run_dir(&cfg.output_root, &cfg.name)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(
        &dir.join("split.json"),
        &SplitRecord {
            shots: cfg.shots,
            seed: cfg.seed,
            labeled_indices: data.split.labeled_indices.clone(),
            eval_indices: data.split.eval_indices.clone(),
        },
    )?;
    let metrics_path = dir.join("metrics.jsonl");
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = std::io::BufWriter::new(file);
    let mut sink = |r: &MetricsRecord| -> Result<()> {
        writeln!(metrics, "{}", r.to_json_line())
            .and_then(|_| metrics.flush())
            .map_err(|e| Error::io(&metrics_path, e))
    };
    let train_data = TrainData {
        source: &data.source,
        split: &data.split,
        source_eval: data.source_test.as_ref(),
    };
    let tcfg = cfg.train_config();
    let (networks, history) = if cfg.semi_supervised {
        let out = mean_teacher::train_semi_supervised(&tcfg, &cfg.semi, &train_data, &mut sink)?;
        (out.evaluation_networks(), out.history)
    } else {
        let out = trainer::train(&tcfg, &train_data, &mut sink)?;
        (out.networks, out.history)
    };
    drop(sink);
    net::save_checkpoint(dir.join("checkpoint.bin"), &networks.to_checkpoint())?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            artifact_version: ARTIFACT_VERSION.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            datasets,
            started_unix_secs,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(RunOutcome {
        dir,
        history,
        networks,
    })
}

/// Which of a checkpoint's networks to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Role {
    Source,
    #[default]
    Target,
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Role::Source),
            "target" => Ok(Role::Target),
            _ => Err(Error::Config(format!("network role {s:?} is not source or target"))),
        }
    }
}

pub fn select_network(networks: &Networks, role: Role) -> &net::ModelParams {
    match role {
        Role::Source => &networks.source,
        Role::Target => networks.target(),
    }
}

/// Which part of a split to keep when evaluating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Labeled,
    Eval,
}

pub fn restrict_to_split(ds: &Dataset, split_path: &Path, part: SplitPart) -> Result<Dataset> {
    let text = fs::read_to_string(split_path).map_err(|e| Error::io(split_path, e))?;
    let rec: SplitRecord = serde_json::from_str(&text).map_err(|e| Error::Format(format!("split file: {e}")))?;
    let idx = match part {
        SplitPart::Labeled => rec.labeled_indices,
        SplitPart::Eval => rec.eval_indices,
    };
    if let Some(&bad) = idx.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::Format(format!(
            "split index {bad} out of range for {} samples",
            ds.len()
        )));
    }
    Ok(ds.subset(format!("{}/split", ds.name), &idx))
}

pub fn load_networks(ckpt: &Path) -> Result<Networks> {
    Networks::from_checkpoint(&net::load_checkpoint(ckpt)?)
}

/// Loads `spec` shaped for `networks`' input layer.
pub fn load_for(networks: &Networks, spec: &DatasetSpec, domain: Domain) -> Result<Dataset> {
    let input = networks.source.arch().input;
    spec.load(domain, input.height, input.width)
}
