//! Experiment orchestration: each pipeline stage reads artifacts from a run
//! directory and writes new ones, so a full run is byte-identical to
//! invoking the stages one by one.
//!
//! Run directory layout:
//!
//! ```text
//! run/
//!   config.json               resolved config (canonical JSON)
//!   FAILED                    failure marker (only after a failed run)
//!   data/dataset.femb         source data, normalized to FEMB
//!   manifest.json             hashes of config + every artifact
//!   metrics.json              cross-seed aggregates
//!   seed_<s>/
//!     partition.json          client assignment + split warnings
//!     clients/client_<m>/{train,val,test}.femb
//!     rounds.jsonl            one log record per client per round
//!     privacy.json            per-client budget report (DP runs)
//!     checkpoints/server.fckp + client_<m>.fckp   (generative methods)
//!     checkpoints/global.json                      (classifier baselines)
//!     synth/synthetic.femb    (generative methods)
//!     downstream/global.json + client_<m>.json
//!     metrics.json            per-client metrics for this seed
//! ```

pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetSource, DistributionKind, ExperimentConfig, Method};
use crate::data::{
    load_dataset, partition_dirichlet, partition_iid, save_dataset, EmbeddingDataset, FileFormat,
    PartitionPlan,
};
use crate::downstream::{select_lambda, train_linear, InterpolatedClassifier};
use crate::error::{Error, Result};
use crate::eval::{accuracy, balanced_accuracy, wasserstein_avg, MetricReport};
use crate::federation::checkpoint::{
    load_checkpoint, model_checkpoint, save_checkpoint, shared_checkpoint, shared_stack_from,
};
use crate::federation::{
    planned_steps, run_federated_training, sample_rate, ClientModel, ClientState, ModelKind,
    SERVER_CLIENT,
};
use crate::models::generate_embeddings;
use crate::models::{CganParams, ClassDistribution, CvaeParams, LinearParams};
use crate::numerics::rng::{Purpose, RngStream, StreamId};
use crate::privacy::{calibrate_noise, default_orders, DpConfig, RdpAccountant};

// ---------------------------------------------------------------------------
// Layout

pub fn config_json_path(run_dir: &Path) -> PathBuf {
    run_dir.join("config.json")
}

pub fn dataset_path(run_dir: &Path) -> PathBuf {
    run_dir.join("data").join("dataset.femb")
}

pub fn manifest_path(run_dir: &Path) -> PathBuf {
    run_dir.join("manifest.json")
}

pub fn run_metrics_path(run_dir: &Path) -> PathBuf {
    run_dir.join("metrics.json")
}

pub fn failure_marker_path(run_dir: &Path) -> PathBuf {
    run_dir.join("FAILED")
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

pub fn partition_path(run_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(run_dir, seed).join("partition.json")
}

pub fn client_dir(run_dir: &Path, seed: u64, client: usize) -> PathBuf {
    seed_dir(run_dir, seed).join("clients").join(format!("client_{client}"))
}

pub fn client_split_path(run_dir: &Path, seed: u64, client: usize, split: &str) -> PathBuf {
    client_dir(run_dir, seed, client).join(format!("{split}.femb"))
}

pub fn rounds_log_path(run_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(run_dir, seed).join("rounds.jsonl")
}

pub fn privacy_path(run_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(run_dir, seed).join("privacy.json")
}

pub fn server_checkpoint_path(run_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(run_dir, seed).join("checkpoints").join("server.fckp")
}

pub fn client_checkpoint_path(run_dir: &Path, seed: u64, client: usize) -> PathBuf {
    seed_dir(run_dir, seed).join("checkpoints").join(format!("client_{client}.fckp"))
}

pub fn global_classifier_path(run_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(run_dir, seed).join("checkpoints").join("global.json")
}

pub fn synthetic_path(run_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(run_dir, seed).join("synth").join("synthetic.femb")
}

pub fn downstream_global_path(run_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(run_dir, seed).join("downstream").join("global.json")
}

pub fn downstream_client_path(run_dir: &Path, seed: u64, client: usize) -> PathBuf {
    seed_dir(run_dir, seed).join("downstream").join(format!("client_{client}.json"))
}

pub fn seed_metrics_path(run_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(run_dir, seed).join("metrics.json")
}

// ---------------------------------------------------------------------------
// Stored artifact schemas

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PartitionFile {
    client_count: usize,
    assignment: Vec<u32>,
    counts: Vec<usize>,
    warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredClassifier {
    d: usize,
    k: usize,
    flat: Vec<f64>,
}

impl StoredClassifier {
    fn from_params(p: &LinearParams) -> Self {
        Self { d: p.d(), k: p.k(), flat: p.flatten() }
    }

    fn to_params(&self) -> Result<LinearParams> {
        let mut p = LinearParams::zeros(self.d, self.k);
        p.set_from_flat(&self.flat)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredLocal {
    d: usize,
    k: usize,
    lambda: f64,
    local_flat: Vec<f64>,
    warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PrivacyRecord {
    client_id: u64,
    sample_rate: f64,
    sigma: f64,
    planned_steps: u64,
    steps_taken: u64,
    epsilon: f64,
    delta: f64,
    best_order: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub id: u64,
    pub acc: f64,
    pub bacc: f64,
    pub acc_global: f64,
    pub bacc_global: f64,
    pub acc_local: Option<f64>,
    pub bacc_local: Option<f64>,
    pub acc_interp: Option<f64>,
    pub bacc_interp: Option<f64>,
    pub lambda: Option<f64>,
    pub wasserstein: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub clients: Vec<ClientMetrics>,
    pub method: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub clients_per_seed: usize,
    pub dataset_sha256: String,
    pub epsilon_max: Option<f64>,
    pub method: String,
    pub metrics: BTreeMap<String, MetricReport>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    artifacts: BTreeMap<String, String>,
    config_sha256: String,
    config_version: u32,
    dataset_sha256: String,
    format_versions: BTreeMap<String, u32>,
    seeds: Vec<u64>,
}

// ---------------------------------------------------------------------------
// Small IO helpers

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let value = serde_json::to_value(value)
        .map_err(|e| Error::Data(format!("cannot serialize {}: {e}", path.display())))?;
    std::fs::write(path, crate::config::to_canonical_json(&value))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("cannot parse {}: {e}", path.display())))
}

/// Error pointing the user at the stage that produces a missing artifact.
fn require_artifact(path: &Path, produced_by: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Data(format!(
            "missing artifact {}; run the {produced_by} stage first",
            path.display()
        )));
    }
    Ok(())
}

fn load_femb(path: &Path, produced_by: &str) -> Result<EmbeddingDataset> {
    require_artifact(path, produced_by)?;
    load_dataset(path, FileFormat::Femb)
}

/// Write the resolved config into the run directory, or verify that the
/// one already there matches byte for byte.
pub fn write_or_verify_config(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    let path = config_json_path(run_dir);
    let text = cfg.canonical_json()?;
    if path.is_file() {
        let existing = std::fs::read_to_string(&path)?;
        if existing != text {
            return Err(Error::Config(format!(
                "{} holds a different configuration; use a fresh run directory",
                path.display()
            )));
        }
        return Ok(());
    }
    std::fs::write(&path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stages

/// Stage 1: materialize the dataset into the run directory as FEMB.
pub fn gen_data(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    write_or_verify_config(cfg, run_dir)?;
    let dataset = match cfg.dataset.source {
        DatasetSource::Blobs => {
            let mut rng =
                RngStream::new(cfg.dataset.seed, StreamId::new(0, 0, Purpose::Blobs));
            crate::data::synth_blobs(
                cfg.dataset.classes,
                cfg.dataset.dim,
                cfg.dataset.n_per_class,
                cfg.dataset.separation,
                &mut rng,
            )?
        }
        DatasetSource::Femb => {
            load_dataset(Path::new(cfg.dataset.path.as_deref().unwrap_or("")), FileFormat::Femb)?
        }
        DatasetSource::Csv => {
            load_dataset(Path::new(cfg.dataset.path.as_deref().unwrap_or("")), FileFormat::Csv)?
        }
    };
    save_dataset(&dataset, &dataset_path(run_dir), FileFormat::Femb)
}

/// Stage 2: assign samples to clients and split each client 3-ways.
pub fn partition_stage(cfg: &ExperimentConfig, run_dir: &Path, seed: u64) -> Result<()> {
    write_or_verify_config(cfg, run_dir)?;
    let dataset = load_femb(&dataset_path(run_dir), "gen-data")?;
    let clients = cfg.partition.clients;
    let mut rng = RngStream::new(seed, StreamId::new(0, 0, Purpose::Partition));
    let plan: PartitionPlan = match cfg.partition.scheme {
        crate::config::PartitionScheme::Iid => partition_iid(&dataset, clients, &mut rng)?,
        crate::config::PartitionScheme::Dirichlet => {
            partition_dirichlet(&dataset, clients, cfg.partition.alpha, &mut rng)?
        }
    };
    let split_spec = cfg.split_spec(seed);
    let mut warnings = Vec::new();
    for m in 0..clients {
        let idx = plan.client_indices(m);
        let sub = dataset.subset(&idx)?;
        let (train, val, test, w) = crate::data::split_dataset(&sub, &split_spec, m as u64)
            .map_err(|e| Error::Data(format!("client {m}: {e}")))?;
        save_dataset(&train, &client_split_path(run_dir, seed, m, "train"), FileFormat::Femb)?;
        save_dataset(&val, &client_split_path(run_dir, seed, m, "val"), FileFormat::Femb)?;
        save_dataset(&test, &client_split_path(run_dir, seed, m, "test"), FileFormat::Femb)?;
        warnings.extend(w.into_iter().map(|w| format!("client {m}: {w}")));
    }
    write_json(
        &partition_path(run_dir, seed),
        &PartitionFile {
            client_count: plan.client_count,
            assignment: plan.assignment,
            counts: plan.counts,
            warnings,
        },
    )
}

fn load_client_states(cfg: &ExperimentConfig, run_dir: &Path, seed: u64) -> Result<Vec<ClientState>> {
    let mut clients = Vec::with_capacity(cfg.partition.clients);
    for m in 0..cfg.partition.clients {
        let train = load_femb(&client_split_path(run_dir, seed, m, "train"), "partition")?;
        let val = load_femb(&client_split_path(run_dir, seed, m, "val"), "partition")?;
        let test = load_femb(&client_split_path(run_dir, seed, m, "test"), "partition")?;
        let (d, k) = (train.d(), train.k());
        let mut init = RngStream::new(seed, StreamId::new(m as u64, 0, Purpose::Init));
        let model = match cfg.method.model_kind() {
            ModelKind::Cvae => {
                ClientModel::Cvae(CvaeParams::init(cfg.cvae_dims(d, k), &mut init)?)
            }
            ModelKind::Cgan => {
                ClientModel::Cgan(CganParams::init(cfg.cgan_dims(d, k), &mut init)?)
            }
            ModelKind::Linear => ClientModel::Linear(LinearParams::zeros(d, k)),
        };
        clients.push(ClientState {
            client_id: m as u64,
            train,
            val,
            test,
            model,
            accountant: None,
        });
    }
    Ok(clients)
}

/// Stage 3: federated training of the generative model (or the baseline
/// classifier), with DP-SGD when enabled.
pub fn train_gen(cfg: &ExperimentConfig, run_dir: &Path, seed: u64) -> Result<()> {
    write_or_verify_config(cfg, run_dir)?;
    let mut clients = load_client_states(cfg, run_dir, seed)?;
    let mut rc = cfg.round_config(seed);

    let mut privacy_setup: Option<(Vec<f64>, f64)> = None; // (per-client q, sigma)
    if cfg.dp.enabled {
        let n_min = clients.iter().map(|c| c.train.n()).min().unwrap_or(0).max(1);
        if cfg.dp.delta >= 1.0 / n_min as f64 {
            eprintln!(
                "warning: dp delta {} is not smaller than 1/n_min = {} \
                 (smallest client train set has {} samples)",
                cfg.dp.delta,
                1.0 / n_min as f64,
                n_min
            );
        }
        let qs: Vec<f64> = clients.iter().map(|c| sample_rate(c.train.n(), &rc)).collect();
        let ts: Vec<u64> = clients.iter().map(|c| planned_steps(c.train.n(), &rc)).collect();
        let sigma = if cfg.dp.noise_multiplier > 0.0 {
            cfg.dp.noise_multiplier
        } else {
            // One shared noise level: the largest per-client calibration,
            // so every client's composed epsilon stays at or under target.
            let orders = default_orders();
            let mut sigma = 0.0f64;
            for (&q, &t) in qs.iter().zip(&ts) {
                sigma = sigma.max(calibrate_noise(cfg.dp.epsilon, cfg.dp.delta, q, t, &orders)?);
            }
            sigma
        };
        let max_q = qs.iter().fold(0.0f64, |a, &b| a.max(b));
        let max_t = ts.iter().copied().max().unwrap_or(1);
        rc.dp = Some(DpConfig {
            epsilon_target: cfg.dp.epsilon,
            delta: cfg.dp.delta,
            clip_norm: cfg.dp.clip_norm,
            noise_multiplier: sigma,
            sample_rate: max_q,
            planned_steps: max_t,
        });
        for (client, &q) in clients.iter_mut().zip(&qs) {
            client.accountant = Some(RdpAccountant::with_default_orders(q, sigma)?);
        }
        privacy_setup = Some((qs, sigma));
    }

    let (server, logs) = run_federated_training(&mut clients, &rc)?;

    let mut log_text = String::new();
    for entry in &logs {
        let value = serde_json::to_value(entry)
            .map_err(|e| Error::Data(format!("cannot serialize round log: {e}")))?;
        log_text.push_str(&crate::config::to_canonical_json(&value));
    }
    let log_path = rounds_log_path(run_dir, seed);
    std::fs::create_dir_all(log_path.parent().expect("seed dir"))?;
    std::fs::write(&log_path, log_text)?;

    let config_hash = cfg.sha256()?;
    match cfg.method.model_kind() {
        ModelKind::Linear => {
            let (d, k) = (clients[0].train.d(), clients[0].train.k());
            write_json(
                &global_classifier_path(run_dir, seed),
                &StoredClassifier { d, k, flat: server.global.values().to_vec() },
            )?;
        }
        kind => {
            let mut reference = clients[0].model.clone();
            server.global.apply_to(&mut reference)?;
            let (d, k) = (clients[0].train.d(), clients[0].train.k());
            let stack = match &reference {
                ClientModel::Cvae(p) => &p.decoder,
                ClientModel::Cgan(p) => &p.generator,
                ClientModel::Linear(_) => unreachable!("matched above"),
            };
            save_checkpoint(
                &server_checkpoint_path(run_dir, seed),
                &shared_checkpoint(kind, d, k, stack, rc.rounds, config_hash),
            )?;
            for client in &clients {
                save_checkpoint(
                    &client_checkpoint_path(run_dir, seed, client.client_id as usize),
                    &model_checkpoint(&client.model, rc.rounds, config_hash),
                )?;
            }
        }
    }

    if let Some((qs, sigma)) = privacy_setup {
        let mut records = Vec::with_capacity(clients.len());
        for (client, &q) in clients.iter().zip(&qs) {
            let accountant = client.accountant.as_ref().expect("dp run has accountants");
            let spent = accountant.spent(cfg.dp.delta)?;
            records.push(PrivacyRecord {
                client_id: client.client_id,
                sample_rate: q,
                sigma,
                planned_steps: planned_steps(client.train.n(), &rc),
                steps_taken: spent.steps_taken,
                epsilon: spent.epsilon,
                delta: spent.delta,
                best_order: spent.best_order,
            });
        }
        write_json(&privacy_path(run_dir, seed), &records)?;
    }
    Ok(())
}

/// Stage 4 (generative methods): sample synthetic embeddings from the
/// aggregated decoder/generator.
pub fn synthesize(cfg: &ExperimentConfig, run_dir: &Path, seed: u64) -> Result<()> {
    if !cfg.method.is_generative() {
        return Err(Error::Config(format!(
            "method {} has no synthesis stage",
            cfg.method_id()
        )));
    }
    write_or_verify_config(cfg, run_dir)?;
    let ckpt_path = server_checkpoint_path(run_dir, seed);
    require_artifact(&ckpt_path, "train-gen")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    if ckpt.config_hash != cfg.sha256()? {
        return Err(Error::Config(format!(
            "{} was produced by a different configuration",
            ckpt_path.display()
        )));
    }
    let stack = shared_stack_from(&ckpt)?;
    let k = ckpt.k as usize;

    let dist = match cfg.synthesis.class_distribution {
        DistributionKind::Uniform => ClassDistribution::uniform(k)?,
        DistributionKind::FromLabels => {
            let mut labels = Vec::new();
            for m in 0..cfg.partition.clients {
                let train = load_femb(&client_split_path(run_dir, seed, m, "train"), "partition")?;
                labels.extend_from_slice(train.y());
            }
            ClassDistribution::from_labels(&labels, k)?
        }
        DistributionKind::Explicit => {
            ClassDistribution::explicit(cfg.synthesis.explicit.clone().unwrap_or_default())?
        }
    };
    if dist.num_classes() != k {
        return Err(Error::Config(format!(
            "synthesis.explicit lists {} classes but the data has {k}",
            dist.num_classes()
        )));
    }

    let source = load_femb(&dataset_path(run_dir), "gen-data")?;
    let mut rng = RngStream::new(seed, StreamId::new(SERVER_CLIENT, 0, Purpose::Latent));
    let synth = generate_embeddings(
        &stack,
        cfg.synthesis.samples,
        &dist,
        &source.meta.extractor_id,
        &mut rng,
    )?;
    save_dataset(&synth, &synthetic_path(run_dir, seed), FileFormat::Femb)
}

fn trains_local_classifier(method: Method) -> bool {
    !matches!(method, Method::Fedavg | Method::Fedprox)
}

/// Stage 5: downstream classifiers — a global one (trained on synthetic
/// data, or taken from the federated baseline) plus per-client local ones
/// with a validation-tuned interpolation weight.
pub fn train_downstream(cfg: &ExperimentConfig, run_dir: &Path, seed: u64) -> Result<()> {
    write_or_verify_config(cfg, run_dir)?;
    let spec = cfg.downstream_spec(seed);

    let global = if cfg.method.is_generative() {
        let synth = load_femb(&synthetic_path(run_dir, seed), "synthesize")?;
        let (params, warnings) = train_linear(&synth, &spec)?;
        for w in warnings {
            eprintln!("warning: global classifier: {w}");
        }
        params
    } else {
        let path = global_classifier_path(run_dir, seed);
        require_artifact(&path, "train-gen")?;
        read_json::<StoredClassifier>(&path)?.to_params()?
    };
    write_json(&downstream_global_path(run_dir, seed), &StoredClassifier::from_params(&global))?;

    if trains_local_classifier(cfg.method) {
        for m in 0..cfg.partition.clients {
            let train = load_femb(&client_split_path(run_dir, seed, m, "train"), "partition")?;
            let val = load_femb(&client_split_path(run_dir, seed, m, "val"), "partition")?;
            let (local, warnings) = train_linear(&train, &spec)
                .map_err(|e| Error::Data(format!("client {m}: {e}")))?;
            let lambda = select_lambda(&local, &global, &val)
                .map_err(|e| Error::Data(format!("client {m}: {e}")))?;
            write_json(
                &downstream_client_path(run_dir, seed, m),
                &StoredLocal {
                    d: local.d(),
                    k: local.k(),
                    lambda,
                    local_flat: local.flatten(),
                    warnings: warnings.into_iter().map(|w| format!("client {m}: {w}")).collect(),
                },
            )?;
        }
    }
    Ok(())
}

/// Stage 6: per-client test metrics for this seed, then refresh the
/// run-level aggregate and manifest.
pub fn evaluate_stage(cfg: &ExperimentConfig, run_dir: &Path, seed: u64) -> Result<()> {
    write_or_verify_config(cfg, run_dir)?;
    let global_path = downstream_global_path(run_dir, seed);
    require_artifact(&global_path, "train-downstream")?;
    let global = read_json::<StoredClassifier>(&global_path)?.to_params()?;

    let synth = if cfg.method.is_generative() {
        Some(load_femb(&synthetic_path(run_dir, seed), "synthesize")?)
    } else {
        None
    };
    let privacy: Option<Vec<PrivacyRecord>> = if cfg.dp.enabled {
        let path = privacy_path(run_dir, seed);
        require_artifact(&path, "train-gen")?;
        Some(read_json(&path)?)
    } else {
        None
    };

    let mut clients = Vec::with_capacity(cfg.partition.clients);
    for m in 0..cfg.partition.clients {
        let test = load_femb(&client_split_path(run_dir, seed, m, "test"), "partition")?;
        let pred_global = global.predict(test.x())?;
        let acc_global = accuracy(&pred_global, test.y())?;
        let bacc_global = balanced_accuracy(&pred_global, test.y(), test.k())?;

        let mut metrics = ClientMetrics {
            id: m as u64,
            acc: acc_global,
            bacc: bacc_global,
            acc_global,
            bacc_global,
            acc_local: None,
            bacc_local: None,
            acc_interp: None,
            bacc_interp: None,
            lambda: None,
            wasserstein: None,
            epsilon: None,
        };

        if trains_local_classifier(cfg.method) {
            let stored: StoredLocal = {
                let path = downstream_client_path(run_dir, seed, m);
                require_artifact(&path, "train-downstream")?;
                read_json(&path)?
            };
            let mut local = LinearParams::zeros(stored.d, stored.k);
            local.set_from_flat(&stored.local_flat)?;
            let pred_local = local.predict(test.x())?;
            metrics.acc_local = Some(accuracy(&pred_local, test.y())?);
            metrics.bacc_local = Some(balanced_accuracy(&pred_local, test.y(), test.k())?);

            let interp = InterpolatedClassifier::new(local, global.clone(), stored.lambda)?;
            let pred = interp.predict(test.x())?;
            let acc_interp = accuracy(&pred, test.y())?;
            let bacc_interp = balanced_accuracy(&pred, test.y(), test.k())?;
            metrics.acc_interp = Some(acc_interp);
            metrics.bacc_interp = Some(bacc_interp);
            metrics.lambda = Some(stored.lambda);
            metrics.acc = acc_interp;
            metrics.bacc = bacc_interp;
        }

        if let Some(synth) = &synth {
            metrics.wasserstein = Some(wasserstein_avg(&test, synth)?);
        }
        if let Some(records) = &privacy {
            metrics.epsilon = records
                .iter()
                .find(|r| r.client_id == m as u64)
                .map(|r| r.epsilon);
        }
        clients.push(metrics);
    }

    write_json(
        &seed_metrics_path(run_dir, seed),
        &SeedMetrics { clients, method: cfg.method_id().to_string(), seed },
    )?;
    finalize_run_artifacts(cfg, run_dir)
}

/// Collect one named metric across all evaluated seeds; `None` unless every
/// client in every seed reports it.
fn collect_metric(
    per_seed: &[SeedMetrics],
    get: impl Fn(&ClientMetrics) -> Option<f64>,
) -> Option<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(per_seed.len());
    for seed in per_seed {
        let row: Option<Vec<f64>> = seed.clients.iter().map(&get).collect();
        out.push(row?);
    }
    Some(out)
}

/// Rebuild `metrics.json` and `manifest.json` from the seed artifacts
/// currently on disk.
pub fn finalize_run_artifacts(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let mut seeds_done = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let path = seed_metrics_path(run_dir, seed);
        if path.is_file() {
            seeds_done.push(seed);
            per_seed.push(read_json::<SeedMetrics>(&path)?);
        }
    }
    if per_seed.is_empty() {
        return Err(Error::Data(format!(
            "no seed metrics under {}; run the evaluate stage first",
            run_dir.display()
        )));
    }

    let mut metrics = BTreeMap::new();
    let mut add = |name: &str, values: Option<Vec<Vec<f64>>>| -> Result<()> {
        if let Some(values) = values {
            metrics.insert(
                name.to_string(),
                crate::eval::aggregate_report(&seeds_done, &values)?,
            );
        }
        Ok(())
    };
    add("acc", collect_metric(&per_seed, |c| Some(c.acc)))?;
    add("bacc", collect_metric(&per_seed, |c| Some(c.bacc)))?;
    add("acc_global", collect_metric(&per_seed, |c| Some(c.acc_global)))?;
    add("bacc_global", collect_metric(&per_seed, |c| Some(c.bacc_global)))?;
    add("acc_local", collect_metric(&per_seed, |c| c.acc_local))?;
    add("bacc_local", collect_metric(&per_seed, |c| c.bacc_local))?;
    add("acc_interp", collect_metric(&per_seed, |c| c.acc_interp))?;
    add("bacc_interp", collect_metric(&per_seed, |c| c.bacc_interp))?;
    add("wasserstein", collect_metric(&per_seed, |c| c.wasserstein))?;

    let epsilon_max = per_seed
        .iter()
        .flat_map(|s| s.clients.iter().filter_map(|c| c.epsilon))
        .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));

    write_json(
        &run_metrics_path(run_dir),
        &RunMetrics {
            clients_per_seed: cfg.partition.clients,
            dataset_sha256: sha256_file(&dataset_path(run_dir))?,
            epsilon_max,
            method: cfg.method_id().to_string(),
            metrics,
            seeds: seeds_done,
        },
    )?;
    write_manifest(cfg, run_dir)
}

fn walk_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<PathBuf> =
        std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .map_err(|_| Error::Data("artifact outside run directory".into()))?;
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn write_manifest(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    walk_files(run_dir, run_dir, &mut files)?;
    let mut artifacts = BTreeMap::new();
    for rel in files {
        if rel == "manifest.json" || rel == "FAILED" {
            continue;
        }
        let digest = sha256_file(&run_dir.join(&rel))?;
        artifacts.insert(rel, digest);
    }
    let manifest = Manifest {
        artifacts,
        config_sha256: hex(&cfg.sha256()?),
        config_version: cfg.config_version,
        dataset_sha256: sha256_file(&dataset_path(run_dir))?,
        format_versions: BTreeMap::from([
            ("fckp".to_string(), crate::federation::checkpoint::VERSION),
            ("femb".to_string(), crate::data::femb::VERSION),
        ]),
        seeds: cfg.seeds.clone(),
    };
    write_json(&manifest_path(run_dir), &manifest)
}

/// All stages for all seeds. On failure, a `FAILED` marker naming the stage
/// is left in the run directory and partial artifacts are retained.
pub fn run(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    match run_stages(cfg, run_dir) {
        Ok(()) => {
            let _ = std::fs::remove_file(failure_marker_path(run_dir));
            Ok(())
        }
        Err((stage, e)) => {
            let _ = std::fs::create_dir_all(run_dir);
            let _ = std::fs::write(
                failure_marker_path(run_dir),
                format!("stage {stage} failed: {e}\n"),
            );
            Err(e)
        }
    }
}

fn run_stages(cfg: &ExperimentConfig, run_dir: &Path) -> std::result::Result<(), (String, Error)> {
    fn tag(stage: &'static str) -> impl Fn(Error) -> (String, Error) {
        move |e| (stage.to_string(), e)
    }
    gen_data(cfg, run_dir).map_err(tag("gen-data"))?;
    for &seed in &cfg.seeds {
        partition_stage(cfg, run_dir, seed).map_err(tag("partition"))?;
        train_gen(cfg, run_dir, seed).map_err(tag("train-gen"))?;
        if cfg.method.is_generative() {
            synthesize(cfg, run_dir, seed).map_err(tag("synthesize"))?;
        }
        train_downstream(cfg, run_dir, seed).map_err(tag("train-downstream"))?;
        evaluate_stage(cfg, run_dir, seed).map_err(tag("evaluate"))?;
    }
    Ok(())
}
