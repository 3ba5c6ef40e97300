//! Experiment configuration: a strict, versioned TOML schema plus the
//! canonical JSON form used for hashing and manifests.
//!
//! Unknown keys are hard errors (a typo must not silently fall back to a
//! default). All defaults match the documented experiment setup: 50 rounds,
//! 5 local epochs, lr 1e-3, (epsilon, delta) = (1.0, 1e-4), clip 1.5,
//! 60:20:20 splits, Dirichlet alpha 0.3, Adam 100 epochs, 3 seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::downstream::TrainSpec;
use crate::error::{Error, Result};
use crate::federation::{BudgetPolicy, ModelKind, RoundConfig};
use crate::models::{CganDims, CvaeDims};

pub const CONFIG_VERSION: u32 = 1;

/// Fixed row order for method comparison tables.
pub const METHOD_ROW_ORDER: [&str; 7] =
    ["fedavg", "fedprox", "fedlambda", "cvae", "cgan", "dp-cvae", "dp-cgan"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedavg,
    Fedprox,
    Fedlambda,
    Cvae,
    Cgan,
}

impl Method {
    /// Generative methods synthesize data; the rest are classifier
    /// baselines.
    pub fn is_generative(self) -> bool {
        matches!(self, Method::Cvae | Method::Cgan)
    }

    /// What the federated rounds train for this method.
    pub fn model_kind(self) -> ModelKind {
        match self {
            Method::Cvae => ModelKind::Cvae,
            Method::Cgan => ModelKind::Cgan,
            Method::Fedavg | Method::Fedprox | Method::Fedlambda => ModelKind::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Blobs,
    Femb,
    Csv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    /// Input file; required for `femb` and `csv` sources.
    #[serde(default)]
    pub path: Option<String>,
    // Blob-generator parameters (used only when source = "blobs").
    #[serde(default = "default_blob_classes")]
    pub classes: usize,
    #[serde(default = "default_blob_dim")]
    pub dim: usize,
    #[serde(default = "default_blob_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "default_blob_separation")]
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_blob_classes() -> usize {
    3
}
fn default_blob_dim() -> usize {
    16
}
fn default_blob_n_per_class() -> usize {
    600
}
fn default_blob_separation() -> f64 {
    8.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    #[serde(default = "default_partition_scheme")]
    pub scheme: PartitionScheme,
    #[serde(default = "default_clients")]
    pub clients: usize,
    /// Dirichlet concentration; smaller is more heterogeneous.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_partition_scheme() -> PartitionScheme {
    PartitionScheme::Dirichlet
}
fn default_clients() -> usize {
    5
}
fn default_alpha() -> f64 {
    0.3
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            scheme: default_partition_scheme(),
            clients: default_clients(),
            alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "default_train_ratio")]
    pub train: f64,
    #[serde(default = "default_val_ratio")]
    pub val: f64,
    #[serde(default = "default_test_ratio")]
    pub test: f64,
    #[serde(default = "default_true")]
    pub stratified: bool,
}

fn default_train_ratio() -> f64 {
    0.6
}
fn default_val_ratio() -> f64 {
    0.2
}
fn default_test_ratio() -> f64 {
    0.2
}
fn default_true() -> bool {
    true
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2, stratified: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvaeSection {
    #[serde(default = "default_latent")]
    pub latent: usize,
    #[serde(default = "default_cvae_h1")]
    pub h1: usize,
    #[serde(default = "default_cvae_h2")]
    pub h2: usize,
}

fn default_latent() -> usize {
    32
}
fn default_cvae_h1() -> usize {
    128
}
fn default_cvae_h2() -> usize {
    64
}

impl Default for CvaeSection {
    fn default() -> Self {
        Self { latent: 32, h1: 128, h2: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CganSection {
    #[serde(default = "default_z_g")]
    pub z_g: usize,
    #[serde(default = "default_g1")]
    pub g1: usize,
    #[serde(default = "default_g2")]
    pub g2: usize,
    #[serde(default = "default_f1")]
    pub f1: usize,
    #[serde(default = "default_f2")]
    pub f2: usize,
}

fn default_z_g() -> usize {
    100
}
fn default_g1() -> usize {
    256
}
fn default_g2() -> usize {
    512
}
fn default_f1() -> usize {
    512
}
fn default_f2() -> usize {
    256
}

impl Default for CganSection {
    fn default() -> Self {
        Self { z_g: 100, g1: 256, g2: 512, f1: 512, f2: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub cvae: CvaeSection,
    #[serde(default)]
    pub cgan: CganSection,
}

fn default_beta() -> f64 {
    1.0
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { beta: 1.0, cvae: CvaeSection::default(), cgan: CganSection::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundsSection {
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: u32,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_rounds() -> u32 {
    50
}
fn default_local_epochs() -> u32 {
    5
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    64
}

impl Default for RoundsSection {
    fn default() -> Self {
        Self { rounds: 50, local_epochs: 5, learning_rate: 1e-3, batch_size: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// 0 means "calibrate automatically to hit epsilon".
    #[serde(default)]
    pub noise_multiplier: f64,
    #[serde(default = "default_policy")]
    pub budget_policy: BudgetPolicy,
}

fn default_epsilon() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    1e-4
}
fn default_clip() -> f64 {
    1.5
}
fn default_policy() -> BudgetPolicy {
    BudgetPolicy::Fail
}

impl Default for DpSection {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 1.0,
            delta: 1e-4,
            clip_norm: 1.5,
            noise_multiplier: 0.0,
            budget_policy: BudgetPolicy::Fail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Uniform,
    FromLabels,
    Explicit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_distribution")]
    pub class_distribution: DistributionKind,
    /// Class probabilities; required when `class_distribution = "explicit"`.
    #[serde(default)]
    pub explicit: Option<Vec<f64>>,
}

fn default_samples() -> usize {
    2000
}
fn default_distribution() -> DistributionKind {
    DistributionKind::Uniform
}

impl Default for SynthesisSection {
    fn default() -> Self {
        Self { samples: 2000, class_distribution: DistributionKind::Uniform, explicit: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_downstream_epochs")]
    pub epochs: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_downstream_epochs() -> u32 {
    100
}

impl Default for DownstreamSection {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 100, batch_size: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedproxSection {
    #[serde(default = "default_mu")]
    pub mu: f64,
}

fn default_mu() -> f64 {
    0.01
}

impl Default for FedproxSection {
    fn default() -> Self {
        Self { mu: 0.01 }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_output_dir() -> String {
    "runs/experiment".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub rounds: RoundsSection,
    #[serde(default)]
    pub dp: DpSection,
    #[serde(default)]
    pub synthesis: SynthesisSection,
    #[serde(default)]
    pub downstream: DownstreamSection,
    #[serde(default)]
    pub fedprox: FedproxSection,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        {
            let mut sorted = self.seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.seeds.len() {
                return Err(Error::Config("seeds must be distinct".into()));
            }
        }
        if self.output_dir.is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }

        match self.dataset.source {
            DatasetSource::Femb | DatasetSource::Csv => {
                if self.dataset.path.as_deref().unwrap_or("").is_empty() {
                    return Err(Error::Config(format!(
                        "dataset.path is required when dataset.source = {:?}",
                        self.dataset.source
                    )));
                }
            }
            DatasetSource::Blobs => {
                let d = &self.dataset;
                if d.classes < 2 {
                    return Err(Error::Config("dataset.classes must be >= 2".into()));
                }
                if d.dim < 2 {
                    return Err(Error::Config("dataset.dim must be >= 2".into()));
                }
                if d.classes > d.dim {
                    return Err(Error::Config(format!(
                        "dataset.classes ({}) must not exceed dataset.dim ({})",
                        d.classes, d.dim
                    )));
                }
                if d.n_per_class == 0 {
                    return Err(Error::Config("dataset.n_per_class must be >= 1".into()));
                }
                if !(d.separation >= 0.0) {
                    return Err(Error::Config("dataset.separation must be >= 0".into()));
                }
            }
        }

        if self.partition.clients == 0 {
            return Err(Error::Config("partition.clients must be >= 1".into()));
        }
        if self.partition.scheme == PartitionScheme::Dirichlet && !(self.partition.alpha > 0.0) {
            return Err(Error::Config(format!(
                "partition.alpha must be > 0 for dirichlet, got {}",
                self.partition.alpha
            )));
        }
        self.split_spec(0).validate()?;

        if !(self.model.beta >= 0.0) {
            return Err(Error::Config(format!(
                "model.beta must be >= 0, got {}",
                self.model.beta
            )));
        }

        // Federated-round sanity, without the per-client DP payload.
        let mut rc = self.round_config(0);
        rc.dp = None;
        rc.validate()?;

        if self.dp.enabled {
            if !self.method.is_generative() {
                return Err(Error::Config(format!(
                    "dp.enabled is only valid for generative methods, not {:?}",
                    self.method
                )));
            }
            if !(self.dp.epsilon > 0.0) {
                return Err(Error::Config("dp.epsilon must be > 0".into()));
            }
            if !(self.dp.delta > 0.0 && self.dp.delta < 1.0) {
                return Err(Error::Config(format!(
                    "dp.delta must be in (0,1), got {}",
                    self.dp.delta
                )));
            }
            if !(self.dp.clip_norm > 0.0) {
                return Err(Error::Config("dp.clip_norm must be > 0".into()));
            }
            if !(self.dp.noise_multiplier >= 0.0) {
                return Err(Error::Config("dp.noise_multiplier must be >= 0".into()));
            }
        }

        if self.synthesis.samples == 0 {
            return Err(Error::Config("synthesis.samples must be >= 1".into()));
        }
        if self.synthesis.class_distribution == DistributionKind::Explicit
            && self.synthesis.explicit.as_deref().unwrap_or(&[]).is_empty()
        {
            return Err(Error::Config(
                "synthesis.explicit must list class probabilities when \
                 synthesis.class_distribution = \"explicit\""
                    .into(),
            ));
        }

        self.downstream_spec(0).validate()?;
        if !(self.fedprox.mu >= 0.0) {
            return Err(Error::Config(format!("fedprox.mu must be >= 0, got {}", self.fedprox.mu)));
        }
        Ok(())
    }

    /// Method identifier used in artifacts and report rows.
    pub fn method_id(&self) -> &'static str {
        match (self.method, self.dp.enabled) {
            (Method::Fedavg, _) => "fedavg",
            (Method::Fedprox, _) => "fedprox",
            (Method::Fedlambda, _) => "fedlambda",
            (Method::Cvae, false) => "cvae",
            (Method::Cvae, true) => "dp-cvae",
            (Method::Cgan, false) => "cgan",
            (Method::Cgan, true) => "dp-cgan",
        }
    }

    pub fn cvae_dims(&self, d: usize, k: usize) -> CvaeDims {
        let m = &self.model.cvae;
        CvaeDims { d, k, latent: m.latent, h1: m.h1, h2: m.h2 }
    }

    pub fn cgan_dims(&self, d: usize, k: usize) -> CganDims {
        let m = &self.model.cgan;
        CganDims { d, k, z_g: m.z_g, g1: m.g1, g2: m.g2, f1: m.f1, f2: m.f2 }
    }

    /// Round schedule for one seed. The DP payload is attached later by the
    /// training stage once per-client sampling rates are known.
    pub fn round_config(&self, seed: u64) -> RoundConfig {
        RoundConfig {
            rounds: self.rounds.rounds,
            local_epochs: self.rounds.local_epochs,
            batch_size: self.rounds.batch_size,
            learning_rate: self.rounds.learning_rate,
            dp: None,
            model_kind: self.method.model_kind(),
            fedprox_mu: if self.method == Method::Fedprox { Some(self.fedprox.mu) } else { None },
            budget_policy: self.dp.budget_policy,
            beta: self.model.beta,
            global_seed: seed,
        }
    }

    pub fn split_spec(&self, seed: u64) -> crate::data::SplitSpec {
        crate::data::SplitSpec {
            train_ratio: self.split.train,
            val_ratio: self.split.val,
            test_ratio: self.split.test,
            stratified: self.split.stratified,
            seed,
        }
    }

    pub fn downstream_spec(&self, seed: u64) -> TrainSpec {
        TrainSpec {
            learning_rate: self.downstream.learning_rate,
            epochs: self.downstream.epochs as usize,
            batch_size: self.downstream.batch_size,
            seed,
        }
    }

    /// Canonical JSON: sorted keys, newline-terminated.
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        Ok(to_canonical_json(&value))
    }

    pub fn sha256(&self) -> Result<[u8; 32]> {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json()?.as_bytes());
        Ok(hasher.finalize().into())
    }
}

/// Serialize a JSON value with recursively sorted object keys and a
/// trailing newline, independent of the serializer's map order.
pub fn to_canonical_json(value: &serde_json::Value) -> String {
    fn sort(value: &serde_json::Value) -> serde_json::Value {
        match value {
            serde_json::Value::Object(map) => {
                let sorted: BTreeMap<&String, &serde_json::Value> = map.iter().collect();
                let mut out = serde_json::Map::new();
                for (k, v) in sorted {
                    out.insert(k.clone(), sort(v));
                }
                serde_json::Value::Object(out)
            }
            serde_json::Value::Array(items) => {
                serde_json::Value::Array(items.iter().map(sort).collect())
            }
            other => other.clone(),
        }
    }
    let mut text = serde_json::to_string(&sort(value)).expect("sorted JSON serializes");
    text.push('\n');
    text
}
