//! Pipeline configuration: one JSON file, relative paths resolved against
//! the file's directory, command-line overrides applied on top.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use logsem::detector::DetectorConfig;
use logsem::drain::DrainConfig;
use logsem::encoder::EncoderConfig;
use logsem::enhancer::{TrainConfig, UpdateGranularity};
use logsem::eval::TimingSettings;
use logsem::ingest::IngestConfig;
use logsem::quant::QuantPolicy;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const STATIC_TABLES: [&str; 3] = ["word2vec", "glove", "fasttext"];

/// Which embedding path feeds the detector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RepresentationChoice {
    Static(String),
    Teacher,
    Student,
    Qtybert,
}

impl FromStr for RepresentationChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "student" => Ok(Self::Student),
            "qtybert" => Ok(Self::Qtybert),
            _ => match s.strip_prefix("static:") {
                Some(name) if STATIC_TABLES.contains(&name) => Ok(Self::Static(name.to_string())),
                _ => Err(format!(
                    "unknown representation {s:?}; expected teacher, student, qtybert or static:{{{}}}",
                    STATIC_TABLES.join("|")
                )),
            },
        }
    }
}

impl TryFrom<String> for RepresentationChoice {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<RepresentationChoice> for String {
    fn from(r: RepresentationChoice) -> String {
        r.to_string()
    }
}

impl fmt::Display for RepresentationChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Static(name) => write!(f, "static:{name}"),
            Self::Teacher => f.write_str("teacher"),
            Self::Student => f.write_str("student"),
            Self::Qtybert => f.write_str("qtybert"),
        }
    }
}

impl RepresentationChoice {
    /// File-name friendly form.
    pub fn slug(&self) -> String {
        match self {
            Self::Static(name) => format!("static-{name}"),
            other => other.to_string(),
        }
    }

    /// Name used in report rows.
    pub fn display_name(&self) -> &'static str {
        match self {
            Self::Static(n) if n == "word2vec" => "Word2Vec",
            Self::Static(n) if n == "glove" => "GloVe",
            Self::Static(_) => "FastText",
            Self::Teacher => "BERT",
            Self::Student => "TinyBERT",
            Self::Qtybert => "QTyBERT",
        }
    }
}

/// Encoder shape plus optional pretrained weights. Without weights the
/// encoder is randomly initialized from the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
}

fn default_max_seq_len() -> usize {
    128
}

impl EncoderSpec {
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            intermediate_size: self.intermediate_size,
            max_seq_len: self.max_seq_len,
            vocab_size,
            layer_norm_eps: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizationSettings {
    pub fraction: f64,
    pub clip_percentile: f64,
    pub calibration_size: usize,
}

impl Default for QuantizationSettings {
    fn default() -> Self {
        let p = QuantPolicy::default();
        Self {
            fraction: p.fraction,
            clip_percentile: p.clip_percentile,
            calibration_size: 70,
        }
    }
}

impl QuantizationSettings {
    pub fn policy(&self) -> QuantPolicy {
        QuantPolicy {
            fraction: self.fraction,
            clip_percentile: self.clip_percentile,
        }
    }
}

/// Another system whose unlabeled events join the enhancer training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSource {
    pub id: String,
    pub dataset: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancerSettings {
    pub rank: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub granularity: UpdateGranularity,
    pub samples_per_system: usize,
    pub extra_systems: Vec<SystemSource>,
}

impl Default for EnhancerSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            rank: t.rank,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            granularity: t.granularity,
            samples_per_system: 500,
            extra_systems: Vec::new(),
        }
    }
}

impl EnhancerSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            rank: self.rank,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed,
            granularity: self.granularity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSettings {
    /// Event pairs sampled for the rank correlation of pairwise similarities.
    pub max_pairs: usize,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self { max_pairs: 20_000 }
    }
}

fn default_system() -> String {
    "default".into()
}

fn default_train_fraction() -> f64 {
    0.7
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_system")]
    pub system: String,
    pub dataset: PathBuf,
    pub ingest: IngestConfig,
    pub vocab: PathBuf,
    #[serde(default)]
    pub static_tables: BTreeMap<String, PathBuf>,
    pub representation: RepresentationChoice,
    pub teacher: EncoderSpec,
    pub student: EncoderSpec,
    #[serde(default)]
    pub drain: DrainConfig,
    #[serde(default)]
    pub quantization: QuantizationSettings,
    #[serde(default)]
    pub enhancer: EnhancerSettings,
    /// Leading (chronological) share of events used for training.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub bench: TimingSettings,
    #[serde(default)]
    pub compare: CompareSettings,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub cores: Option<usize>,
    pub representation: Option<RepresentationChoice>,
}

pub const OUT_DIR_ENV: &str = "LOGSEM_OUT_DIR";

fn field_err(field: &str, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("config field `{field}`: {msg}"))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Reads, resolves paths, applies overrides (flag > environment > file
    /// for the output directory) and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        resolve(&base, &mut cfg.dataset);
        resolve(&base, &mut cfg.vocab);
        resolve(&base, &mut cfg.output_dir);
        for p in cfg.static_tables.values_mut() {
            resolve(&base, p);
        }
        for spec in [&mut cfg.teacher, &mut cfg.student] {
            if let Some(w) = spec.weights.as_mut() {
                resolve(&base, w);
            }
        }
        for s in &mut cfg.enhancer.extra_systems {
            resolve(&base, &mut s.dataset);
        }

        if let Some(env) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            cfg.output_dir = PathBuf::from(env);
        }
        if let Some(o) = &overrides.output_dir {
            cfg.output_dir = o.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(cores) = overrides.cores {
            cfg.bench.cores = cores;
        }
        if let Some(r) = &overrides.representation {
            cfg.representation = r.clone();
        }
        cfg.detector.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let exists = |field: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(field_err(field, format!("{} does not exist", p.display())))
            }
        };
        exists("dataset", &self.dataset)?;
        exists("vocab", &self.vocab)?;
        for (name, p) in &self.static_tables {
            if !STATIC_TABLES.contains(&name.as_str()) {
                return Err(field_err("static_tables", format!("unknown table {name:?}")));
            }
            exists(&format!("static_tables.{name}"), p)?;
        }
        if let RepresentationChoice::Static(name) = &self.representation {
            if !self.static_tables.contains_key(name) {
                return Err(field_err(
                    "representation",
                    format!("static:{name} selected but static_tables.{name} is not set"),
                ));
            }
        }
        for (field, spec) in [("teacher", &self.teacher), ("student", &self.student)] {
            if let Some(w) = &spec.weights {
                exists(&format!("{field}.weights"), w)?;
            }
            spec.encoder_config(1)
                .validate()
                .map_err(|e| field_err(field, e))?;
        }
        self.ingest.layout().map_err(|e| field_err("ingest", e))?;
        self.drain.validate().map_err(|e| field_err("drain", e))?;
        let q = &self.quantization;
        if !(q.fraction > 0.0 && q.fraction < 1.0) {
            return Err(field_err("quantization.fraction", format!("{} is outside (0, 1)", q.fraction)));
        }
        if !(0.0..50.0).contains(&q.clip_percentile) {
            return Err(field_err(
                "quantization.clip_percentile",
                format!("{} is outside [0, 50)", q.clip_percentile),
            ));
        }
        if q.calibration_size == 0 {
            return Err(field_err("quantization.calibration_size", "must be ≥ 1"));
        }
        self.enhancer
            .train_config(self.seed)
            .validate()
            .map_err(|e| field_err("enhancer", e))?;
        if self.enhancer.epochs == 0 {
            return Err(field_err("enhancer.epochs", "must be ≥ 1"));
        }
        if self.enhancer.samples_per_system == 0 {
            return Err(field_err("enhancer.samples_per_system", "must be ≥ 1"));
        }
        for s in &self.enhancer.extra_systems {
            exists("enhancer.extra_systems", &s.dataset)?;
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(field_err("train_fraction", format!("{} is outside (0, 1)", self.train_fraction)));
        }
        self.detector.validate().map_err(|e| field_err("detector", e))?;
        self.bench.validate().map_err(|e| field_err("bench", e))?;
        if self.compare.max_pairs < 3 {
            return Err(field_err("compare.max_pairs", "must be ≥ 3"));
        }
        Ok(())
    }
}
