//! Experiment configuration: a TOML file whose relative paths are resolved
//! against the file's directory, with `section.key=value` overrides.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/toy"
//!
//! [generate]
//! corpus = "data/train.iob"
//! variant = "small"
//! output = "data/synth"
//! lexicon = "data/synth.lexicon"
//!
//! [bpe]
//! merges = "data/bpe.merges"
//! operations = 40000
//!
//! [model]
//! hidden_size = 256
//!
//! [trainer]
//! group_size = 128
//! accumulate = 11
//!
//! [[task]]
//! id = "atis"
//! role = "synthetic"
//! train_src = "data/synth.src"
//! train_tgt = "data/synth.tgt"
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::synth::Variant;
use crate::trainer::{Role, TrainerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("bad override {0:?}: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    /// Annotated training corpus the templates are taken from.
    pub corpus: PathBuf,
    /// Placeholder values; collected from `corpus` when absent.
    pub table: Option<PathBuf>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_threshold")]
    pub cartesian_threshold: usize,
    /// Output prefix: writes `<output>.src`, `<output>.tgt`, `<output>.manifest`.
    pub output: PathBuf,
    pub lexicon: PathBuf,
    /// Annotated corpora converted as-is to `<output>.valid.*` / `<output>.test.*`.
    pub valid_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
}

fn default_variant() -> Variant {
    Variant::Small
}

fn default_threshold() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeSection {
    /// When false, whole words are the model's tokens.
    pub enabled: bool,
    pub merges: PathBuf,
    pub operations: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
}

impl Default for BpeSection {
    fn default() -> Self {
        BpeSection {
            enabled: true,
            merges: PathBuf::from("bpe.merges"),
            operations: 40_000,
            src_vocab_size: 50_000,
            tgt_vocab_size: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub id: String,
    pub role: Role,
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub generate: Option<GenerateSection>,
    #[serde(default)]
    pub bpe: BpeSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(rename = "task", default)]
    pub tasks: Vec<TaskSection>,
}

fn default_seed() -> u64 {
    1
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().ok_or_else(|| ConfigError::Override(key.into()))?;
    let mut table = root;
    for s in sections {
        let next = table
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = next.as_table_mut().ok_or_else(|| ConfigError::Override(key.into()))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn from_str_with(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let perr = |msg: String| ConfigError::Parse {
            path: origin.into(),
            msg,
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| perr(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            let k = k.trim();
            if k.is_empty() || k.split('.').any(str::is_empty) {
                return Err(ConfigError::Override(o.clone()));
            }
            set_path(&mut table, k, override_value(v.trim()))?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| perr(e.to_string()))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    /// Reads `path`, applies overrides, and resolves relative paths against
    /// the directory containing `path`.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_str_with(&text, &path.display().to_string(), overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    /// The one seed all randomness derives from.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.trainer.seed = seed;
        self
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.bpe.merges);
        if let Some(g) = &mut self.generate {
            fix(&mut g.corpus);
            fix(&mut g.output);
            fix(&mut g.lexicon);
            for p in [&mut g.table, &mut g.valid_corpus, &mut g.test_corpus].into_iter().flatten() {
                fix(p);
            }
        }
        for t in &mut self.tasks {
            fix(&mut t.train_src);
            fix(&mut t.train_tgt);
            for p in [&mut t.valid_src, &mut t.valid_tgt, &mut t.test_src, &mut t.test_tgt, &mut t.lexicon]
                .into_iter()
                .flatten()
            {
                fix(p);
            }
        }
    }

    pub fn synthetic_task(&self) -> Result<&TaskSection> {
        let synth: Vec<&TaskSection> = self.tasks.iter().filter(|t| t.role == Role::Synthetic).collect();
        match synth.as_slice() {
            [one] => Ok(one),
            _ => Err(ConfigError::Invalid(format!(
                "exactly one synthetic task is required, found {}",
                synth.len()
            ))),
        }
    }

    /// Structural checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for t in &self.tasks {
            if t.id.is_empty() || !t.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(ConfigError::Invalid(format!(
                    "task id {:?} must be non-empty and use only letters, digits, '_' or '-'",
                    t.id
                )));
            }
            if !ids.insert(&t.id) {
                return Err(ConfigError::Invalid(format!("task {} declared twice", t.id)));
            }
            if t.valid_src.is_some() != t.valid_tgt.is_some() || t.test_src.is_some() != t.test_tgt.is_some() {
                return Err(ConfigError::Invalid(format!("task {}: src and tgt files must come in pairs", t.id)));
            }
        }
        let synth = self.synthetic_task()?;
        if synth.valid_src.is_none() || synth.lexicon.is_none() {
            return Err(ConfigError::Invalid(format!(
                "synthetic task {} needs valid_src, valid_tgt and lexicon for epoch selection",
                synth.id
            )));
        }
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.trainer
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(g) = &self.generate {
            if g.cartesian_threshold == 0 {
                return Err(ConfigError::Invalid("generate.cartesian_threshold must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Every task file that training reads, for existence checks.
    pub fn training_inputs(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = Vec::new();
        for t in &self.tasks {
            out.push(&t.train_src);
            out.push(&t.train_tgt);
            for p in [&t.valid_src, &t.valid_tgt, &t.test_src, &t.test_tgt, &t.lexicon].into_iter().flatten() {
                out.push(p);
            }
        }
        out
    }
}
