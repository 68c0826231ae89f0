//! TOML configuration files read by the command-line tool.
//!
//! Every subcommand reads the same format. Errors carry the file path and
//! the 1-based line of the offending key or table.
//!
//! Model and cluster tables may name a built-in preset and override
//! individual fields:
//!
//! ```toml
//! [model]
//! preset = "gpt-20b"
//! num_encoders = 20
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Spanned, Table, Value};

use crate::benchkit::Aggregate;
use crate::regress::{default_candidates, Candidate, Hyperparams, ModelKind};
use crate::workload::{ClusterSpec, ModelConfig, ParallelLayout};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// A parsed file, kept around so later semantic errors can be located.
pub struct Source {
    pub path: PathBuf,
    pub text: String,
}

impl Source {
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Source {
            path: path.to_path_buf(),
            text,
        })
    }

    pub fn inline(name: &str, text: &str) -> Self {
        Source {
            path: PathBuf::from(name),
            text: text.to_string(),
        }
    }

    pub fn error_at(&self, offset: usize, message: impl fmt::Display) -> ConfigError {
        ConfigError::Parse {
            path: self.path.clone(),
            line: line_of(&self.text, offset),
            message: message.to_string(),
        }
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, ConfigError> {
        toml::from_str(&self.text).map_err(|e| {
            let offset = e.span().map_or(0, |s| s.start);
            self.error_at(offset, e.message().trim_end())
        })
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    Source::read(path)?.parse()
}

/// Applies `overrides` on top of `base` and deserializes the result.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, overrides: Table) -> Result<T, String> {
    let mut table = match Value::try_from(base).map_err(|e| e.to_string())? {
        Value::Table(t) => t,
        _ => unreachable!("presets serialize to tables"),
    };
    for (k, v) in overrides {
        table.insert(k, v);
    }
    Value::Table(table).try_into().map_err(|e: toml::de::Error| e.message().to_string())
}

fn with_preset<T: Serialize + DeserializeOwned>(
    src: &Source,
    value: &Spanned<Value>,
    what: &str,
    lookup: fn(&str) -> Option<T>,
) -> Result<T, ConfigError> {
    let at = value.span().start;
    let Value::Table(table) = value.get_ref().clone() else {
        return Err(src.error_at(at, format!("{what} must be a table")));
    };
    let mut table = table;
    let resolved = match table.remove("preset") {
        Some(Value::String(name)) => {
            let base = lookup(&name).ok_or_else(|| src.error_at(at, format!("unknown {what} preset `{name}`")))?;
            overlay(&base, table)
        }
        Some(_) => return Err(src.error_at(at, "preset must be a string")),
        None => Value::Table(table).try_into().map_err(|e: toml::de::Error| e.message().to_string()),
    };
    resolved.map_err(|m| src.error_at(at, format!("in {what}: {m}")))
}

pub fn cluster_preset(name: &str) -> Option<ClusterSpec> {
    match name.to_ascii_lowercase().as_str() {
        "perlmutter" => Some(ClusterSpec::perlmutter()),
        "vista" => Some(ClusterSpec::vista()),
        _ => None,
    }
}

fn layout_at(src: &Source, s: &Spanned<String>) -> Result<ParallelLayout, ConfigError> {
    s.get_ref().parse().map_err(|e| src.error_at(s.span().start, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPredict {
    model: Spanned<Value>,
    cluster: Spanned<Value>,
    layout: Option<Spanned<String>>,
}

/// One model on one cluster, optionally with a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictConfig {
    pub model: ModelConfig,
    pub cluster: ClusterSpec,
    pub layout: Option<ParallelLayout>,
}

impl PredictConfig {
    pub fn from_source(src: &Source) -> Result<Self, ConfigError> {
        let raw: RawPredict = src.parse()?;
        Ok(PredictConfig {
            model: with_preset(src, &raw.model, "model", ModelConfig::preset)?,
            cluster: with_preset(src, &raw.cluster, "cluster", cluster_preset)?,
            layout: raw.layout.as_ref().map(|l| layout_at(src, l)).transpose()?,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    #[serde(default)]
    models: Vec<Spanned<Value>>,
    #[serde(default)]
    layouts: Vec<Spanned<String>>,
    #[serde(default)]
    clusters: Vec<Spanned<Value>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub models: Vec<ModelConfig>,
    pub layouts: Vec<ParallelLayout>,
    pub clusters: Vec<ClusterSpec>,
}

impl SweepConfig {
    pub fn from_source(src: &Source) -> Result<Self, ConfigError> {
        let raw: RawSweep = src.parse()?;
        let models = raw
            .models
            .iter()
            .map(|m| with_preset(src, m, "model", ModelConfig::preset))
            .collect::<Result<_, _>>()?;
        let clusters = raw
            .clusters
            .iter()
            .map(|c| with_preset(src, c, "cluster", cluster_preset))
            .collect::<Result<_, _>>()?;
        let layouts = raw.layouts.iter().map(|l| layout_at(src, l)).collect::<Result<_, _>>()?;
        Ok(SweepConfig {
            models,
            layouts,
            clusters,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty() || self.layouts.is_empty() || self.clusters.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateKind {
    Forest,
    Gbt,
}

/// One entry of the `[[candidates]]` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSpec {
    pub kind: CandidateKind,
    pub n_trees: usize,
    pub max_depth: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_leaf")]
    pub min_samples_leaf: usize,
    pub bootstrap: Option<bool>,
    pub max_features: Option<usize>,
}

fn default_lr() -> f64 {
    0.1
}

fn default_leaf() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl CandidateSpec {
    pub fn to_candidate(&self) -> Candidate {
        let (kind, base) = match self.kind {
            CandidateKind::Forest => (ModelKind::Forest, Hyperparams::forest(self.n_trees, self.max_depth)),
            CandidateKind::Gbt => (
                ModelKind::Gbt,
                Hyperparams::gbt(self.n_trees, self.learning_rate, self.max_depth),
            ),
        };
        Candidate {
            kind,
            hyperparams: Hyperparams {
                min_samples_leaf: self.min_samples_leaf,
                bootstrap: self.bootstrap.unwrap_or(base.bootstrap),
                max_features: self.max_features,
                ..base
            },
        }
    }
}

/// Settings for `train`. An empty candidate list means the default grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub aggregate: Aggregate,
    #[serde(default = "yes")]
    pub log_target: bool,
    #[serde(default)]
    pub candidates: Vec<CandidateSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            aggregate: Aggregate::default(),
            log_target: true,
            candidates: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn candidates(&self) -> Vec<Candidate> {
        if self.candidates.is_empty() {
            default_candidates()
        } else {
            self.candidates.iter().map(CandidateSpec::to_candidate).collect()
        }
    }
}

/// Settings for `validate-timeline`: an exhaustive homogeneous grid plus
/// seeded random heterogeneous stage times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineConfig {
    #[serde(default = "default_max_m")]
    pub max_micro_batches: usize,
    #[serde(default = "default_max_s")]
    pub max_stages: usize,
    #[serde(default = "default_fwd")]
    pub fwd: f64,
    #[serde(default = "default_bwd")]
    pub bwd: f64,
    #[serde(default = "default_sync")]
    pub sync: f64,
    #[serde(default = "default_update")]
    pub update: f64,
    /// Random heterogeneous cases to compare; their gaps are reported but
    /// not required to vanish.
    #[serde(default = "default_trials")]
    pub heterogeneous_trials: usize,
}

fn default_max_m() -> usize {
    32
}
fn default_max_s() -> usize {
    8
}
fn default_fwd() -> f64 {
    1.0
}
fn default_bwd() -> f64 {
    2.0
}
fn default_sync() -> f64 {
    0.5
}
fn default_update() -> f64 {
    0.25
}
fn default_trials() -> usize {
    100
}

impl Default for TimelineConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchkit::SynthHardwareModel;

    #[test]
    fn preset_with_override() {
        let src = Source::inline(
            "p.toml",
            "layout = \"4-4-8\"\n[model]\npreset = \"gpt-20b\"\nnum_encoders = 20\n[cluster]\npreset = \"perlmutter\"\n",
        );
        let cfg = PredictConfig::from_source(&src).unwrap();
        assert_eq!(cfg.model.num_encoders, 20);
        assert_eq!(cfg.model.hidden_dim, 6144);
        assert_eq!(cfg.cluster, ClusterSpec::perlmutter());
        assert_eq!(cfg.layout, Some(ParallelLayout::new(4, 4, 8)));
    }

    #[test]
    fn errors_carry_path_and_line() {
        let src = Source::inline("p.toml", "[model]\npreset = \"gpt-20b\"\n\n[cluster]\npreset = \"nowhere\"\n");
        let msg = PredictConfig::from_source(&src).unwrap_err().to_string();
        assert!(msg.starts_with("p.toml:4:"), "{msg}");
        assert!(msg.contains("nowhere"), "{msg}");

        let src = Source::inline("p.toml", "layout = \"4x4\"\n[model]\npreset = \"gpt-20b\"\n[cluster]\npreset = \"vista\"\n");
        let msg = PredictConfig::from_source(&src).unwrap_err().to_string();
        assert!(msg.starts_with("p.toml:1:"), "{msg}");

        let src = Source::inline("p.toml", "[model]\npreset = \"gpt-20b\"\nhidden = 3\n[cluster]\npreset = \"vista\"\n");
        let msg = PredictConfig::from_source(&src).unwrap_err().to_string();
        assert!(msg.contains("hidden"), "{msg}");
    }

    #[test]
    fn missing_hardware_field_is_named() {
        let full = toml::to_string(&SynthHardwareModel::default()).unwrap();
        let text: String = full.lines().filter(|l| !l.starts_with("beta")).map(|l| format!("{l}\n")).collect();
        let err = Source::inline("hw.toml", &text).parse::<SynthHardwareModel>().unwrap_err();
        assert!(err.to_string().contains("`beta`"), "{err}");
        let back: SynthHardwareModel = Source::inline("hw.toml", &full).parse().unwrap();
        assert_eq!(back, SynthHardwareModel::default());
    }

    #[test]
    fn train_defaults_and_candidates() {
        let cfg: TrainConfig = Source::inline("t.toml", "").parse().unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.candidates(), default_candidates());
        let cfg: TrainConfig = Source::inline(
            "t.toml",
            "aggregate = \"median\"\n[[candidates]]\nkind = \"gbt\"\nn_trees = 10\nmax_depth = 3\nlearning_rate = 0.2\n",
        )
        .parse()
        .unwrap();
        assert_eq!(cfg.aggregate, Aggregate::Median);
        assert_eq!(cfg.candidates(), vec![Candidate::gbt(10, 0.2, 3)]);
    }

    #[test]
    fn sweep_lists() {
        let text = "layouts = [\"4-4-8\", \"8-4-4\"]\n[[models]]\npreset = \"llama-13b\"\n[[clusters]]\npreset = \"perlmutter\"\n";
        let cfg = SweepConfig::from_source(&Source::inline("s.toml", text)).unwrap();
        assert_eq!(cfg.layouts.len(), 2);
        assert_eq!(cfg.models[0].name, "LLaMA-13B");
        assert!(!cfg.is_empty());
        let cfg = SweepConfig::from_source(&Source::inline("s.toml", "layouts = []\n")).unwrap();
        assert!(cfg.is_empty());
    }

    #[test]
    fn timeline_defaults() {
        let cfg = TimelineConfig::default();
        assert_eq!((cfg.max_micro_batches, cfg.max_stages), (32, 8));
    }
}
