//! Declarative experiment configuration.
//!
//! One schema-versioned TOML file describes an entire experiment grid:
//! corpus, model variants, training protocol (including the σ sweep),
//! attack selection, and report parameters. Unknown keys are rejected so a
//! typo cannot silently change a run. Every field has a default; the
//! defaults form the seeded benchmark configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lmleak::attacks::{AdversarySpec, FitHyper};
use lmleak::corpus::GenConfig;
use lmleak::model::{ModelConfig, Objective};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// The one schema revision this binary understands.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub corpus: CorpusSection,
    /// Model variants keyed by name; every variant trains a full grid column.
    #[serde(default = "default_models")]
    pub models: BTreeMap<String, ModelConfig>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Existing JSONL corpus to ingest; when unset, a synthetic corpus is
    /// generated from `gen`.
    #[serde(default)]
    pub source: Option<PathBuf>,
    #[serde(default = "default_gen")]
    pub gen: GenConfig,
    /// Fraction of patients assigned to the training side.
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Plain-SGD cell.
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// DP-SGD cells.
    #[serde(default = "default_lr")]
    pub dp_learning_rate: f64,
    #[serde(default = "default_dp_epochs")]
    pub dp_epochs: usize,
    /// Expected Poisson lot size B̄.
    #[serde(default = "default_batch")]
    pub lot_size: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Per-patient sample cap applied before DP training.
    #[serde(default = "default_cap")]
    pub patient_cap: usize,
    /// Noise multipliers for the DP sweep; includes a negligible-noise
    /// ablation cell so clipping-only leakage is visible.
    #[serde(default = "default_sigma_sweep")]
    pub sigma_sweep: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// Attack names; each must be one of S-BBA, A-BBA, P-BBA, S-AWBA, S-GWBA.
    #[serde(default = "default_attacks")]
    pub attacks: Vec<String>,
    /// Attack split seeds (controls the learned attacks' 20/80 split and the
    /// per-sample scoring masks).
    #[serde(default = "default_attack_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub hyper: FitHyper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default = "default_n_buckets")]
    pub n_buckets: usize,
    #[serde(default = "default_min_bucket_size")]
    pub min_bucket_size: usize,
    /// Group size k for the group-DP budget rows.
    #[serde(default = "default_group_k")]
    pub group_k: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    /// Independent benchmark repetitions; trend assertions average over them.
    #[serde(default = "default_bench_seeds")]
    pub n_seeds: usize,
}

fn default_split_ratio() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    0.25
}
fn default_epochs() -> usize {
    45
}
fn default_dp_epochs() -> usize {
    3
}
fn default_batch() -> usize {
    16
}
fn default_clip() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    1e-6
}
fn default_cap() -> usize {
    50
}
fn default_sigma_sweep() -> Vec<f64> {
    vec![2.0, 1.0, 0.1, 1e-2, 1e-3, 1e-4, 1e-20]
}
fn default_attacks() -> Vec<String> {
    ["S-BBA", "A-BBA", "P-BBA", "S-AWBA", "S-GWBA"]
        .into_iter()
        .map(str::to_string)
        .collect()
}
fn default_attack_seeds() -> Vec<u64> {
    vec![0]
}
fn default_n_buckets() -> usize {
    10
}
fn default_min_bucket_size() -> usize {
    10
}
fn default_group_k() -> u64 {
    50
}
fn default_bench_seeds() -> usize {
    5
}

fn default_gen() -> GenConfig {
    GenConfig {
        // One-sample notes with a steep code distribution: short notes keep
        // the attack stage cheap, the steep Zipf exponent widens the rarity
        // gradient, and the large filler vocabulary gives every patient
        // distinctive identifier and style tokens to memorize.
        zipf_exponent: 1.9,
        notes_per_admission: [2, 2],
        note_len: [16, 16],
        vocab_size: 696,
        boilerplate_fraction: 0.15,
        ..GenConfig::default()
    }
}

fn default_models() -> BTreeMap<String, ModelConfig> {
    let base = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        model_dim: 48,
        ff_dim: 96,
        vocab_size: 696,
        seq_len: 16,
        objective: Objective::Mlm,
        mask_rate: 0.15,
    };
    let mut m = BTreeMap::new();
    m.insert("mlm".to_string(), base);
    m.insert(
        "ar".to_string(),
        ModelConfig {
            objective: Objective::Ar,
            ..base
        },
    );
    m
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            source: None,
            gen: default_gen(),
            split_ratio: default_split_ratio(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            dp_learning_rate: default_lr(),
            dp_epochs: default_dp_epochs(),
            lot_size: default_batch(),
            clip_norm: default_clip(),
            delta: default_delta(),
            patient_cap: default_cap(),
            sigma_sweep: default_sigma_sweep(),
        }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            attacks: default_attacks(),
            seeds: default_attack_seeds(),
            hyper: FitHyper::default(),
        }
    }
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            n_buckets: default_n_buckets(),
            min_bucket_size: default_min_bucket_size(),
            group_k: default_group_k(),
        }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            n_seeds: default_bench_seeds(),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            corpus: CorpusSection::default(),
            models: default_models(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            report: ReportSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML experiment file.
    pub fn from_path(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves the effective config: the file when given, else the built-in
    /// benchmark defaults.
    pub fn resolve(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
        match path {
            Some(p) => Self::from_path(p),
            None => {
                let cfg = ExperimentConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    /// Parses the configured attack names.
    pub fn adversaries(&self) -> Result<Vec<AdversarySpec>, CliError> {
        parse_attack_names(&self.attack.attacks)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.schema_version != SCHEMA_VERSION {
            return usage(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.corpus.split_ratio > 0.0 && self.corpus.split_ratio < 1.0) {
            return usage("corpus.split_ratio must lie strictly between 0 and 1".into());
        }
        if self.models.is_empty() {
            return usage("at least one model variant is required".into());
        }
        for (name, m) in &self.models {
            if name.is_empty()
                || !name
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
            {
                return usage(format!(
                    "model variant name {name:?} must be non-empty [a-z0-9_-]"
                ));
            }
            m.validate()
                .map_err(|e| CliError::Usage(format!("model {name}: {e}")))?;
        }
        let t = &self.train;
        if [t.learning_rate, t.dp_learning_rate]
            .iter()
            .any(|lr| lr.is_nan() || *lr <= 0.0)
        {
            return usage("train learning rates must be > 0".into());
        }
        if t.epochs == 0 || t.dp_epochs == 0 {
            return usage("train epochs must be >= 1".into());
        }
        if t.batch_size == 0 || t.lot_size == 0 {
            return usage("batch_size and lot_size must be >= 1".into());
        }
        if t.clip_norm.is_nan() || t.clip_norm <= 0.0 {
            return usage("clip_norm must be > 0".into());
        }
        if !(t.delta > 0.0 && t.delta < 1.0) {
            return usage("delta must lie in (0, 1)".into());
        }
        if t.patient_cap == 0 {
            return usage("patient_cap must be >= 1".into());
        }
        for &s in &t.sigma_sweep {
            if !(s.is_finite() && s >= 0.0) {
                return usage(format!("sigma sweep value {s} must be finite and >= 0"));
            }
        }
        parse_attack_names(&self.attack.attacks)?;
        if self.attack.seeds.is_empty() {
            return usage("attack.seeds must not be empty".into());
        }
        let h = &self.attack.hyper;
        if h.l2.is_nan() || h.l2 < 0.0 || h.iterations == 0 || h.step.is_nan() || h.step <= 0.0 {
            return usage("attack.hyper requires l2 >= 0, iterations >= 1, step > 0".into());
        }
        if self.report.n_buckets == 0 || self.report.min_bucket_size == 0 {
            return usage("report bucket parameters must be >= 1".into());
        }
        if self.report.group_k == 0 {
            return usage("report.group_k must be >= 1".into());
        }
        if self.bench.n_seeds == 0 {
            return usage("bench.n_seeds must be >= 1".into());
        }
        Ok(())
    }
}

/// Parses attack names, rejecting unknown ones with a usage error.
pub fn parse_attack_names(names: &[String]) -> Result<Vec<AdversarySpec>, CliError> {
    if names.is_empty() {
        return Err(CliError::Usage("attack list must not be empty".into()));
    }
    names
        .iter()
        .map(|n| {
            AdversarySpec::parse(n).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown attack name {n:?} (expected one of S-BBA, A-BBA, P-BBA, S-AWBA, S-GWBA)"
                ))
            })
        })
        .collect()
}
