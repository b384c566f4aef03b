//! Experiment configuration: a sectioned key-value text format plus typed
//! accessors. Key names are unique across sections, so command-line flags
//! can override any file key by bare name through the same `set` entry
//! point. Later assignments win; unknown sections, keys, or values are
//! rejected with their line number.

use crate::controller::BaselineMode;
use crate::error::{Error, Result};
use crate::losses::{DistanceKind, EmbeddingSource};
use crate::trainer::{FineTuneConfig, MetricChoice};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Pretrain on source classes, fine-tune on disjoint target classes.
    Transfer,
    /// Same classes, shifted target appearance.
    DomainAdaptToy,
    /// Sweep shots per class, clustered against plain fine-tuning.
    AblationK,
    /// Sweep which prefix of clusterable layers keeps its groups.
    AblationLayers,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transfer" => Ok(TaskKind::Transfer),
            "domain-adapt-toy" => Ok(TaskKind::DomainAdaptToy),
            "ablation-k" => Ok(TaskKind::AblationK),
            "ablation-layers" => Ok(TaskKind::AblationLayers),
            other => Err(Error::BadConfig(format!(
                "unknown task `{other}` (expected transfer, domain-adapt-toy, ablation-k, ablation-layers)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Transfer => "transfer",
            TaskKind::DomainAdaptToy => "domain-adapt-toy",
            TaskKind::AblationK => "ablation-k",
            TaskKind::AblationLayers => "ablation-layers",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMethod {
    None,
    Manual,
    Greedy,
    Rl,
}

impl SearchMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SearchMethod::None),
            "manual" => Ok(SearchMethod::Manual),
            "greedy" => Ok(SearchMethod::Greedy),
            "rl" => Ok(SearchMethod::Rl),
            other => Err(Error::BadConfig(format!(
                "unknown search method `{other}` (expected none, manual, greedy, rl)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SearchMethod::None => "none",
            SearchMethod::Manual => "manual",
            SearchMethod::Greedy => "greedy",
            SearchMethod::Rl => "rl",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSettings {
    pub method: SearchMethod,
    pub budget: usize,
    pub episodes_per_update: usize,
    pub policy_lr: f64,
    pub hidden_dim: usize,
    pub baseline: BaselineMode,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            method: SearchMethod::None,
            budget: 200,
            episodes_per_update: 5,
            policy_lr: 0.005,
            hidden_dim: 32,
            baseline: BaselineMode::Off,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub k: usize,
    /// Shot counts swept by the ablation-k task.
    pub ks: Vec<usize>,
    pub runs: usize,
    pub out_dir: PathBuf,
    /// Optional external dataset replacing the synthetic target domain.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Clustering batch size, per source class.
    pub cluster_samples: usize,
    pub pretrain_iterations: usize,
    pub kmeans_restarts: usize,
    /// Explicit per-layer group counts for method `none`; all singletons
    /// when absent.
    pub groups: Option<Vec<usize>>,
    pub fine_tune: FineTuneConfig,
    pub search: SearchSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::Transfer,
            seed: 0,
            k: 5,
            ks: vec![1, 5, 10],
            runs: 10,
            out_dir: PathBuf::from("out"),
            images: None,
            labels: None,
            cluster_samples: 20,
            pretrain_iterations: 300,
            kmeans_restarts: 10,
            groups: None,
            fine_tune: FineTuneConfig::default(),
            search: SearchSettings::default(),
        }
    }
}

/// `(section, key)` pairs the parser accepts. Key names are globally
/// unique so `set` can take the bare key.
const KEYS: &[(&str, &str)] = &[
    ("experiment", "task"),
    ("experiment", "seed"),
    ("experiment", "k"),
    ("experiment", "ks"),
    ("experiment", "runs"),
    ("experiment", "out"),
    ("experiment", "images"),
    ("experiment", "labels"),
    ("experiment", "cluster-samples"),
    ("experiment", "pretrain-iterations"),
    ("clustering", "restarts"),
    ("clustering", "groups"),
    ("clustering", "cluster-layers"),
    ("fine-tune", "iterations"),
    ("fine-tune", "lr"),
    ("fine-tune", "lr-decayed"),
    ("fine-tune", "lr-decay-at"),
    ("fine-tune", "metric"),
    ("fine-tune", "embedding"),
    ("loss", "margin"),
    ("loss", "alpha"),
    ("loss", "beta"),
    ("loss", "gamma"),
    ("loss", "distance"),
    ("search", "method"),
    ("search", "budget"),
    ("search", "episodes-per-update"),
    ("search", "policy-lr"),
    ("search", "hidden"),
    ("search", "baseline"),
];

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::BadConfig(format!("{key}: `{value}` is not a non-negative integer")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::BadConfig(format!("{key}: `{value}` is not a non-negative integer")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::BadConfig(format!("{key}: `{value}` is not a number")))
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Err(Error::BadConfig(format!("{key}: empty list")));
    }
    value
        .split(',')
        .map(|part| parse_usize(key, part.trim()))
        .collect()
}

impl ExperimentConfig {
    /// Assign one key. `key` is the bare name used both in config files and
    /// as a command-line flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = TaskKind::parse(value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "k" => self.k = parse_usize(key, value)?,
            "ks" => self.ks = parse_usize_list(key, value)?,
            "runs" => self.runs = parse_usize(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "images" => self.images = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "cluster-samples" => self.cluster_samples = parse_usize(key, value)?,
            "pretrain-iterations" => self.pretrain_iterations = parse_usize(key, value)?,
            "restarts" => self.kmeans_restarts = parse_usize(key, value)?,
            "groups" => self.groups = Some(parse_usize_list(key, value)?),
            "cluster-layers" => {
                self.fine_tune.clustered_layers = Some(parse_usize_list(key, value)?)
            }
            "iterations" => self.fine_tune.iterations = parse_usize(key, value)?,
            "lr" => self.fine_tune.schedule.initial = parse_f64(key, value)?,
            "lr-decayed" => self.fine_tune.schedule.decayed = parse_f64(key, value)?,
            "lr-decay-at" => self.fine_tune.schedule.decay_at = parse_usize(key, value)?,
            "metric" => self.fine_tune.metric = MetricChoice::parse(value)?,
            "embedding" => self.fine_tune.embedding = EmbeddingSource::parse(value)?,
            "margin" => self.fine_tune.weights.margin = parse_f64(key, value)?,
            "alpha" => self.fine_tune.weights.alpha_intra = parse_f64(key, value)?,
            "beta" => self.fine_tune.weights.beta_inter = parse_f64(key, value)?,
            "gamma" => self.fine_tune.weights.gamma_metric = parse_f64(key, value)?,
            "distance" => self.fine_tune.weights.distance = DistanceKind::parse(value)?,
            "method" => self.search.method = SearchMethod::parse(value)?,
            "budget" => self.search.budget = parse_usize(key, value)?,
            "episodes-per-update" => self.search.episodes_per_update = parse_usize(key, value)?,
            "policy-lr" => self.search.policy_lr = parse_f64(key, value)?,
            "hidden" => self.search.hidden_dim = parse_usize(key, value)?,
            "baseline" => {
                self.search.baseline = match value {
                    "off" => BaselineMode::Off,
                    "on" => BaselineMode::Ema { decay: 0.9 },
                    other => {
                        return Err(Error::BadConfig(format!(
                            "baseline: `{other}` is not on or off"
                        )))
                    }
                }
            }
            other => return Err(Error::BadConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse the sectioned text format on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<&str> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                section = Some(
                    KEYS.iter()
                        .map(|(s, _)| *s)
                        .find(|s| *s == name)
                        .ok_or_else(|| {
                            Error::BadConfig(format!("line {line_no}: unknown section `{name}`"))
                        })?,
                );
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::BadConfig(format!("line {line_no}: expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            let section = section.ok_or_else(|| {
                Error::BadConfig(format!("line {line_no}: key `{key}` before any section"))
            })?;
            if !KEYS.contains(&(section, key)) {
                return Err(Error::BadConfig(format!(
                    "line {line_no}: unknown key `{key}` in section `{section}`"
                )));
            }
            self.set(key, value)
                .map_err(|e| Error::BadConfig(format!("line {line_no}: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        ExperimentConfig::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::BadConfig("k must be at least 1".into()));
        }
        if self.ks.is_empty() || self.ks.iter().any(|&k| k == 0) {
            return Err(Error::BadConfig("ks must list shot counts >= 1".into()));
        }
        if self.runs == 0 {
            return Err(Error::BadConfig("runs must be at least 1".into()));
        }
        if self.cluster_samples == 0 {
            return Err(Error::BadConfig("cluster-samples must be at least 1".into()));
        }
        if self.pretrain_iterations == 0 {
            return Err(Error::BadConfig("pretrain-iterations must be at least 1".into()));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::BadConfig("restarts must be at least 1".into()));
        }
        if let Some(groups) = &self.groups {
            if groups.iter().any(|&g| g == 0) {
                return Err(Error::BadConfig("groups must all be >= 1".into()));
            }
        }
        self.fine_tune.validate()?;
        if self.search.method == SearchMethod::Rl {
            let s = &self.search;
            if s.episodes_per_update == 0 || s.budget < s.episodes_per_update {
                return Err(Error::BadConfig(format!(
                    "search budget {} must cover at least one batch of {} episodes",
                    s.budget, s.episodes_per_update
                )));
            }
            if !s.policy_lr.is_finite() || s.policy_lr <= 0.0 {
                return Err(Error::BadConfig(format!(
                    "policy-lr must be finite and > 0, got {}",
                    s.policy_lr
                )));
            }
            if s.hidden_dim == 0 {
                return Err(Error::BadConfig("hidden must be at least 1".into()));
            }
        }
        match (&self.images, &self.labels) {
            (None, None) => {}
            (Some(images), Some(labels)) => {
                for path in [images, labels] {
                    if !path.exists() {
                        return Err(Error::BadConfig(format!(
                            "referenced file {} does not exist",
                            path.display()
                        )));
                    }
                }
            }
            _ => {
                return Err(Error::BadConfig(
                    "images and labels must be given together".into(),
                ))
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = ExperimentConfig::from_text("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn full_file_parses() {
        let text = "\
# sweep config
[experiment]
task = ablation-k
seed = 42
k = 10
ks = 1, 5, 10
runs = 3
out = /tmp/sweep
cluster-samples = 8

[clustering]
restarts = 4
groups = 4,2,8

[fine-tune]
iterations = 50
lr = 0.02
lr-decayed = 0.002
lr-decay-at = 25
metric = margin
embedding = logits

[loss]
margin = 2.0
alpha = 0.3
beta = 0.05
gamma = 0.7
distance = total-variation

[search]
method = rl
budget = 100
episodes-per-update = 10
policy-lr = 0.1
hidden = 16
baseline = on
";
        let cfg = ExperimentConfig::from_text(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.task, TaskKind::AblationK);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.ks, vec![1, 5, 10]);
        assert_eq!(cfg.groups, Some(vec![4, 2, 8]));
        assert_eq!(cfg.fine_tune.schedule.decay_at, 25);
        assert_eq!(cfg.fine_tune.metric, MetricChoice::Margin);
        assert_eq!(cfg.fine_tune.weights.margin, 2.0);
        assert_eq!(
            cfg.fine_tune.weights.distance,
            DistanceKind::TotalVariation
        );
        assert_eq!(cfg.search.method, SearchMethod::Rl);
        assert_eq!(cfg.search.baseline, BaselineMode::Ema { decay: 0.9 });
    }

    #[test]
    fn unknown_key_reports_line_number() {
        let err = ExperimentConfig::from_text("[experiment]\nbogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn key_outside_its_section_is_rejected() {
        let err = ExperimentConfig::from_text("[loss]\nseed = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key `seed` in section `loss`"));
    }

    #[test]
    fn key_before_any_section_is_rejected() {
        let err = ExperimentConfig::from_text("seed = 3\n").unwrap_err();
        assert!(err.to_string().contains("before any section"));
    }

    #[test]
    fn later_assignment_wins() {
        let cfg =
            ExperimentConfig::from_text("[experiment]\nseed = 1\nseed = 9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn cli_style_override_wins_over_file() {
        let mut cfg = ExperimentConfig::from_text("[experiment]\nseed = 1\n").unwrap();
        cfg.set("seed", "77").unwrap();
        assert_eq!(cfg.seed, 77);
        cfg.set("alpha", "0.5").unwrap();
        assert_eq!(cfg.fine_tune.weights.alpha_intra, 0.5);
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.set("seed", "abc").is_err());
        assert!(cfg.set("ks", "").is_err());
        assert!(cfg.set("baseline", "maybe").is_err());
        assert!(cfg.set("task", "office31").is_err());
    }

    #[test]
    fn validation_catches_degenerate_settings() {
        let mut cfg = ExperimentConfig::default();
        cfg.k = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.runs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.groups = Some(vec![4, 0]);
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.search.method = SearchMethod::Rl;
        cfg.search.budget = 2;
        cfg.search.episodes_per_update = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dataset_paths_must_exist_and_pair_up() {
        let mut cfg = ExperimentConfig::default();
        cfg.images = Some(PathBuf::from("/nonexistent/images.idx"));
        assert!(cfg.validate().is_err());
        cfg.labels = Some(PathBuf::from("/nonexistent/labels.idx"));
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("does not exist"), "{msg}");
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images.idx");
        let labels = dir.path().join("labels.idx");
        std::fs::write(&images, b"x").unwrap();
        std::fs::write(&labels, b"x").unwrap();
        cfg.images = Some(images);
        cfg.labels = Some(labels);
        cfg.validate().unwrap();
    }
}
