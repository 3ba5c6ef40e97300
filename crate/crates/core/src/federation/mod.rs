//! Round-based federated training: broadcast the shared weights, train
//! locally ((DP-)SGD over Poisson batches), aggregate by training-set size.
//!
//! Determinism contract: every random draw keys on `(global_seed,
//! client_id, round, purpose)` and aggregation always reduces in ascending
//! `client_id` order, so results are bit-identical for any worker count,
//! scheduling order, or in-memory client permutation.
//!
//! Privacy structure: the only transmitted payload type is
//! [`SharedWeights`], which is constructed from the decoder (CVAE),
//! generator (CGAN), or the full classifier (baselines) — encoder and
//! discriminator parameters cannot enter it.

pub mod checkpoint;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::models::{CganParams, CvaeParams, LinearParams};
use crate::numerics::rng::{Purpose, RngStream, StreamId};
use crate::numerics::sgd_step;
use crate::privacy::{
    clip_per_sample, noisy_aggregate, DpBatchInfo, DpConfig, DpObserver, RdpAccountant,
    SanitizedGradient,
};

/// Stream namespace for server-side draws (initialization, synthesis).
pub const SERVER_CLIENT: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cvae,
    Cgan,
    Linear,
}

/// What to do when the next DP step would exceed the epsilon target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetPolicy {
    /// Stop stepping, emit a warning, keep the weights trained so far.
    Warn,
    /// Abort the run with a budget error.
    Fail,
}

/// One client's trainable model.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientModel {
    Cvae(CvaeParams),
    Cgan(CganParams),
    Linear(LinearParams),
}

impl ClientModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            ClientModel::Cvae(_) => ModelKind::Cvae,
            ClientModel::Cgan(_) => ModelKind::Cgan,
            ClientModel::Linear(_) => ModelKind::Linear,
        }
    }

    fn shared_flat(&self) -> Vec<f64> {
        match self {
            ClientModel::Cvae(p) => p.decoder.flatten(),
            ClientModel::Cgan(p) => p.generator.flatten(),
            ClientModel::Linear(p) => p.flatten(),
        }
    }

    fn set_shared_flat(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            ClientModel::Cvae(p) => p.decoder.set_from_flat(flat),
            ClientModel::Cgan(p) => p.generator.set_from_flat(flat),
            ClientModel::Linear(p) => p.set_from_flat(flat),
        }
    }
}

/// The wire type for client->server and server->client weight exchange.
/// Holds only the shared part of a model, never encoders/discriminators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedWeights {
    kind: ModelKind,
    values: Vec<f64>,
}

impl SharedWeights {
    pub fn from_model(model: &ClientModel) -> Self {
        Self { kind: model.kind(), values: model.shared_flat() }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Overwrite the model's shared part with these weights.
    pub fn apply_to(&self, model: &mut ClientModel) -> Result<()> {
        if model.kind() != self.kind {
            return Err(Error::Shape(format!(
                "cannot apply {:?} weights to a {:?} model",
                self.kind,
                model.kind()
            )));
        }
        model.set_shared_flat(&self.values)
    }
}

/// Federated training schedule and local-step hyperparameters.
/// Defaults: 50 rounds, 5 local epochs, SGD at 1e-3, batch size 64.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundConfig {
    pub rounds: u32,
    pub local_epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dp: Option<DpConfig>,
    pub model_kind: ModelKind,
    /// FedProx proximal strength; `None` means plain FedAvg.
    pub fedprox_mu: Option<f64>,
    pub budget_policy: BudgetPolicy,
    /// CVAE KL weight.
    pub beta: f64,
    pub global_seed: u64,
}

impl RoundConfig {
    pub fn new(model_kind: ModelKind) -> Self {
        Self {
            rounds: 50,
            local_epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            dp: None,
            model_kind,
            fedprox_mu: None,
            budget_policy: BudgetPolicy::Fail,
            beta: 1.0,
            global_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::Config("rounds and local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
            if self.model_kind == ModelKind::Linear {
                return Err(Error::Config(
                    "federated classifiers run without differential privacy".into(),
                ));
            }
        }
        if let Some(mu) = self.fedprox_mu {
            if !(mu >= 0.0) {
                return Err(Error::Config(format!("fedprox mu must be >= 0, got {mu}")));
            }
            if self.model_kind != ModelKind::Linear {
                return Err(Error::Config("fedprox applies to classifier training only".into()));
            }
        }
        Ok(())
    }
}

/// Gradient steps one client will take over the whole schedule (Poisson
/// batches: `ceil(n/B)` draws per epoch).
pub fn planned_steps(n_train: usize, cfg: &RoundConfig) -> u64 {
    let per_epoch = n_train.div_ceil(cfg.batch_size).max(1) as u64;
    cfg.rounds as u64 * cfg.local_epochs as u64 * per_epoch
}

/// Poisson sampling rate for a client of `n_train` samples.
pub fn sample_rate(n_train: usize, cfg: &RoundConfig) -> f64 {
    (cfg.batch_size as f64 / n_train as f64).min(1.0)
}

/// One client: its data splits, personal model, and DP accountant.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u64,
    pub train: EmbeddingDataset,
    pub val: EmbeddingDataset,
    pub test: EmbeddingDataset,
    pub model: ClientModel,
    pub accountant: Option<RdpAccountant>,
}

/// Server side: current global shared weights and the round counter.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: SharedWeights,
    pub round: u32,
    /// Aggregation weights in ascending-client-id order; sum to 1.
    pub agg_weights: Vec<f64>,
}

/// Outcome of one client's local training pass.
#[derive(Debug, Clone)]
pub struct LocalTrainReport {
    pub mean_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub epsilon_spent: Option<f64>,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

/// One JSON-lines record per client per round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLogEntry {
    pub round: u32,
    pub client_id: u64,
    pub mean_loss: f64,
    pub steps: u64,
    pub epsilon_spent: Option<f64>,
}

/// The only entry point that turns a gradient into a parameter update.
fn apply_update(flat: &mut [f64], grad: &SanitizedGradient, lr: f64) {
    sgd_step(flat, grad.values(), lr);
}

/// Run `local_epochs` of (DP-)SGD from the given global weights and return
/// the client's updated shared part.
pub fn local_train(
    client: &mut ClientState,
    global: &SharedWeights,
    cfg: &RoundConfig,
    round: u32,
    mut observer: Option<&mut dyn DpObserver>,
) -> Result<(SharedWeights, LocalTrainReport)> {
    global.apply_to(&mut client.model)?;
    if cfg.dp.is_some() && client.accountant.is_none() {
        return Err(Error::Config(format!(
            "client {} trains with DP but has no accountant",
            client.client_id
        )));
    }

    let n = client.train.n();
    let q = sample_rate(n, cfg);
    let steps_per_epoch = n.div_ceil(cfg.batch_size).max(1);
    let sid = |p: Purpose| StreamId::new(client.client_id, round as u64, p);
    let mut batch_rng = RngStream::new(cfg.global_seed, sid(Purpose::Batch));
    let mut noise_rng = RngStream::new(cfg.global_seed, sid(Purpose::Noise));
    let mut model_rng = RngStream::new(
        cfg.global_seed,
        sid(match client.model.kind() {
            ModelKind::Cgan => Purpose::GanLatent,
            _ => Purpose::Reparam,
        }),
    );

    let mut report = LocalTrainReport {
        mean_loss: 0.0,
        epoch_losses: Vec::with_capacity(cfg.local_epochs as usize),
        steps: 0,
        epsilon_spent: None,
        stopped_early: false,
        warnings: Vec::new(),
    };
    let mut loss_sum = 0.0;

    'epochs: for _epoch in 0..cfg.local_epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0u64;
        for _step in 0..steps_per_epoch {
            let idx: Vec<usize> = (0..n).filter(|_| batch_rng.next_f64() <= q).collect();
            if idx.is_empty() {
                // Empty Poisson draw: nothing is touched, nothing is spent.
                continue;
            }
            if let (Some(dp), Some(acc)) = (&cfg.dp, client.accountant.as_ref()) {
                let eps_next = acc.epsilon_after(1, dp.delta)?;
                if eps_next > dp.epsilon_target + 1e-9 {
                    let spent = acc.spent(dp.delta)?;
                    match cfg.budget_policy {
                        BudgetPolicy::Warn => {
                            report.warnings.push(format!(
                                "client {}: privacy budget exhausted after {} steps \
                                 (next epsilon {:.6} > target {}); stopping local training",
                                client.client_id, spent.steps_taken, eps_next, dp.epsilon_target
                            ));
                            report.stopped_early = true;
                            break 'epochs;
                        }
                        BudgetPolicy::Fail => {
                            return Err(Error::BudgetExceeded(format!(
                                "client {}: next step would spend epsilon {:.6} > target {} \
                                 (steps taken: {}, delta {})",
                                client.client_id,
                                eps_next,
                                dp.epsilon_target,
                                spent.steps_taken,
                                dp.delta
                            )));
                        }
                    }
                }
            }

            let xb = client.train.x().select_rows(&idx);
            let yb: Vec<u32> = idx.iter().map(|&i| client.train.y()[i]).collect();
            let loss = train_step(
                client,
                cfg,
                global,
                &xb,
                &yb,
                &mut model_rng,
                &mut noise_rng,
                &mut observer,
            )?;
            loss_sum += loss;
            epoch_loss += loss;
            epoch_steps += 1;
            report.steps += 1;
        }
        report
            .epoch_losses
            .push(if epoch_steps > 0 { epoch_loss / epoch_steps as f64 } else { f64::NAN });
    }

    if report.steps > 0 {
        report.mean_loss = loss_sum / report.steps as f64;
    }
    if let (Some(dp), Some(acc)) = (&cfg.dp, client.accountant.as_ref()) {
        report.epsilon_spent = Some(acc.epsilon(dp.delta)?);
    }
    Ok((SharedWeights::from_model(&client.model), report))
}

/// One gradient step on one Poisson batch. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
fn train_step(
    client: &mut ClientState,
    cfg: &RoundConfig,
    global: &SharedWeights,
    xb: &crate::numerics::Matrix,
    yb: &[u32],
    model_rng: &mut RngStream,
    noise_rng: &mut RngStream,
    observer: &mut Option<&mut dyn DpObserver>,
) -> Result<f64> {
    let lr = cfg.learning_rate;
    match (&mut client.model, &cfg.dp) {
        (ClientModel::Cvae(p), Some(dp)) => {
            let back = p.loss_and_grads(xb, yb, cfg.beta, model_rng)?;
            let sanitized = clip_noise_account(
                back.per_sample_grads,
                dp,
                client.accountant.as_mut().expect("checked above"),
                noise_rng,
                observer,
            );
            let mut flat = p.flatten();
            apply_update(&mut flat, &sanitized, lr);
            p.set_from_flat(&flat)?;
            Ok(back.loss)
        }
        (ClientModel::Cvae(p), None) => {
            let (loss, grad) = p.loss_and_batch_grad(xb, yb, cfg.beta, model_rng)?;
            let mut flat = p.flatten();
            apply_update(&mut flat, &SanitizedGradient::non_private(grad), lr);
            p.set_from_flat(&flat)?;
            Ok(loss)
        }
        (ClientModel::Cgan(p), Some(dp)) => {
            let back = p.disc_loss_and_grads(xb, yb, model_rng)?;
            let sanitized = clip_noise_account(
                back.per_sample_grads,
                dp,
                client.accountant.as_mut().expect("checked above"),
                noise_rng,
                observer,
            );
            let mut disc_flat = p.discriminator.flatten();
            apply_update(&mut disc_flat, &sanitized, lr);
            p.discriminator.set_from_flat(&disc_flat)?;
            // Generator sees only the DP-trained discriminator:
            // post-processing, no privacy spend.
            let (gen_loss, gen_grad) = p.gen_loss_and_grad(yb, model_rng)?;
            let mut gen_flat = p.generator.flatten();
            apply_update(&mut gen_flat, &SanitizedGradient::non_private(gen_grad), lr);
            p.generator.set_from_flat(&gen_flat)?;
            Ok(back.loss + gen_loss)
        }
        (ClientModel::Cgan(p), None) => {
            let (disc_loss, disc_grad) = p.disc_loss_and_batch_grad(xb, yb, model_rng)?;
            let mut disc_flat = p.discriminator.flatten();
            apply_update(&mut disc_flat, &SanitizedGradient::non_private(disc_grad), lr);
            p.discriminator.set_from_flat(&disc_flat)?;
            let (gen_loss, gen_grad) = p.gen_loss_and_grad(yb, model_rng)?;
            let mut gen_flat = p.generator.flatten();
            apply_update(&mut gen_flat, &SanitizedGradient::non_private(gen_grad), lr);
            p.generator.set_from_flat(&gen_flat)?;
            Ok(disc_loss + gen_loss)
        }
        (ClientModel::Linear(p), None) => {
            let (loss, grad) = p.cross_entropy_and_grad(xb, yb)?;
            let mut flat = p.flatten();
            match cfg.fedprox_mu {
                // Proximal (implicit) step: stable for any mu and equal to
                // plain SGD at mu = 0.
                Some(mu) if mu > 0.0 => {
                    let denom = 1.0 + lr * mu;
                    for ((w, &g), &wg) in
                        flat.iter_mut().zip(&grad).zip(global.values())
                    {
                        *w = (*w - lr * g + lr * mu * wg) / denom;
                    }
                }
                _ => apply_update(&mut flat, &SanitizedGradient::non_private(grad), lr),
            }
            p.set_from_flat(&flat)?;
            Ok(loss)
        }
        (ClientModel::Linear(_), Some(_)) => Err(Error::Config(
            "federated classifiers run without differential privacy".into(),
        )),
    }
}

/// Clip, noise, account, and notify the observer — the one DP funnel.
fn clip_noise_account(
    per_sample: Vec<Vec<f64>>,
    dp: &DpConfig,
    accountant: &mut RdpAccountant,
    noise_rng: &mut RngStream,
    observer: &mut Option<&mut dyn DpObserver>,
) -> SanitizedGradient {
    let pre_clip_norms: Vec<f64> =
        per_sample.iter().map(|g| crate::numerics::matrix::l2_norm(g)).collect();
    let clipped = clip_per_sample(&per_sample, dp.clip_norm);
    let sanitized = noisy_aggregate(&clipped, dp.clip_norm, dp.noise_multiplier, noise_rng);
    accountant.advance(1);
    if let Some(obs) = observer.as_deref_mut() {
        let post_clip_norms: Vec<f64> =
            clipped.iter().map(|g| crate::numerics::matrix::l2_norm(g)).collect();
        obs.on_batch(&DpBatchInfo {
            step: accountant.steps_taken(),
            batch_len: clipped.len(),
            pre_clip_norms,
            post_clip_norms,
            clip_norm: dp.clip_norm,
            sigma: dp.noise_multiplier,
        });
    }
    sanitized
}

/// Exact size-weighted average of client updates (`w_m = n_m / sum n`).
pub fn aggregate_shared(updates: &[SharedWeights], n_train: &[usize]) -> Result<SharedWeights> {
    if updates.is_empty() || updates.len() != n_train.len() {
        return Err(Error::Shape(format!(
            "aggregate: {} updates with {} sizes",
            updates.len(),
            n_train.len()
        )));
    }
    if n_train.iter().any(|&n| n == 0) {
        return Err(Error::Shape("aggregate: every client needs n_train >= 1".into()));
    }
    let kind = updates[0].kind;
    let len = updates[0].values.len();
    for u in updates {
        if u.kind != kind || u.values.len() != len {
            return Err(Error::Shape("aggregate: weight sets differ in shape".into()));
        }
    }
    let total: f64 = n_train.iter().map(|&n| n as f64).sum();
    let mut out = vec![0.0; len];
    for (u, &n) in updates.iter().zip(n_train) {
        let w = n as f64 / total;
        for (o, &v) in out.iter_mut().zip(&u.values) {
            *o += w * v;
        }
    }
    Ok(SharedWeights { kind, values: out })
}

/// Aggregation weights in the same order as the inputs; sum to 1.
pub fn aggregation_weights(n_train: &[usize]) -> Vec<f64> {
    let total: f64 = n_train.iter().map(|&n| n as f64).sum();
    n_train.iter().map(|&n| n as f64 / total).collect()
}

fn server_initial_global(reference: &ClientModel, seed: u64) -> Result<SharedWeights> {
    let mut rng = RngStream::new(seed, StreamId::new(SERVER_CLIENT, 0, Purpose::Init));
    let model = match reference {
        ClientModel::Cvae(p) => ClientModel::Cvae(CvaeParams::init(p.dims, &mut rng)?),
        ClientModel::Cgan(p) => ClientModel::Cgan(CganParams::init(p.dims, &mut rng)?),
        ClientModel::Linear(p) => ClientModel::Linear(LinearParams::zeros(p.d(), p.k())),
    };
    Ok(SharedWeights::from_model(&model))
}

/// Full schedule: `rounds x (broadcast -> local_train -> aggregate)`.
/// Clients may train on parallel workers; the reduction order is fixed by
/// client id, so the result does not depend on scheduling.
pub fn run_federated_training(
    clients: &mut [ClientState],
    cfg: &RoundConfig,
) -> Result<(ServerState, Vec<RoundLogEntry>)> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Config("federated training needs at least one client".into()));
    }
    for c in clients.iter() {
        if c.model.kind() != cfg.model_kind {
            return Err(Error::Config(format!(
                "client {} has a {:?} model but the run is configured for {:?}",
                c.client_id,
                c.model.kind(),
                cfg.model_kind
            )));
        }
    }
    // Process in ascending client id regardless of slice order.
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by_key(|&i| clients[i].client_id);

    let mut server = ServerState {
        global: server_initial_global(&clients[order[0]].model, cfg.global_seed)?,
        round: 0,
        agg_weights: aggregation_weights(
            &order.iter().map(|&i| clients[i].train.n()).collect::<Vec<_>>(),
        ),
    };
    let mut logs = Vec::with_capacity(clients.len() * cfg.rounds as usize);

    for round in 1..=cfg.rounds {
        let global = server.global.clone();
        // Train in parallel (slice order), then consume in id order.
        let mut results: Vec<Option<Result<(SharedWeights, LocalTrainReport)>>> = clients
            .par_iter_mut()
            .map(|client| Some(local_train(client, &global, cfg, round, None)))
            .collect();

        let mut updates = Vec::with_capacity(order.len());
        let mut sizes = Vec::with_capacity(order.len());
        for &slot in &order {
            let (weights, rep) = results[slot].take().expect("each slot filled once")?;
            let client = &clients[slot];
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            logs.push(RoundLogEntry {
                round,
                client_id: client.client_id,
                mean_loss: rep.mean_loss,
                steps: rep.steps,
                epsilon_spent: rep.epsilon_spent,
            });
            updates.push(weights);
            sizes.push(client.train.n());
        }
        server.global = aggregate_shared(&updates, &sizes)?;
        server.round = round;
    }
    Ok((server, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::models::{CvaeDims, CvaeParams};
    use crate::privacy::RecordingObserver;

    fn lin_shared(d: usize, k: usize, vals: &[f64]) -> SharedWeights {
        let mut p = LinearParams::zeros(d, k);
        p.set_from_flat(vals).unwrap();
        SharedWeights::from_model(&ClientModel::Linear(p))
    }

    fn linear_client(id: u64, n_per_class: usize, seed: u64) -> ClientState {
        let mut rng = RngStream::new(seed, StreamId::new(id, 0, Purpose::Blobs));
        let data = synth_blobs(2, 2, n_per_class, 4.0, &mut rng).unwrap();
        ClientState {
            client_id: id,
            train: data.clone(),
            val: data.clone(),
            test: data,
            model: ClientModel::Linear(LinearParams::zeros(2, 2)),
            accountant: None,
        }
    }

    fn cvae_client(id: u64, n_per_class: usize, seed: u64, dims: CvaeDims) -> ClientState {
        let mut rng = RngStream::new(seed, StreamId::new(id, 0, Purpose::Blobs));
        let data = synth_blobs(dims.k, dims.d, n_per_class, 4.0, &mut rng).unwrap();
        let mut init = RngStream::new(seed, StreamId::new(id, 0, Purpose::Init));
        ClientState {
            client_id: id,
            train: data.clone(),
            val: data.clone(),
            test: data,
            model: ClientModel::Cvae(CvaeParams::init(dims, &mut init).unwrap()),
            accountant: None,
        }
    }

    fn small_dims() -> CvaeDims {
        CvaeDims { d: 4, k: 2, latent: 3, h1: 16, h2: 8 }
    }

    #[test]
    fn aggregate_equal_sizes_averages() {
        // Two equal clients at 0 and 2 average to exactly 1 everywhere.
        let a = lin_shared(1, 2, &[0.0; 4]);
        let b = lin_shared(1, 2, &[2.0; 4]);
        let out = aggregate_shared(&[a, b], &[5, 5]).unwrap();
        assert_eq!(out.values(), &[1.0; 4]);
    }

    #[test]
    fn aggregate_respects_train_sizes() {
        // Sizes 1 and 3 give weights 1/4 and 3/4: 0 and 4 combine to 3.
        let a = lin_shared(1, 2, &[0.0; 4]);
        let b = lin_shared(1, 2, &[4.0; 4]);
        let out = aggregate_shared(&[a, b], &[1, 3]).unwrap();
        assert_eq!(out.values(), &[3.0; 4]);
    }

    #[test]
    fn aggregate_single_client_is_identity() {
        let a = lin_shared(2, 2, &[0.25, -1.5, 3.0, 0.0, 7.5, -0.125]);
        let out = aggregate_shared(std::slice::from_ref(&a), &[17]).unwrap();
        assert_eq!(out.values(), a.values());
    }

    #[test]
    fn aggregate_weights_sum_to_one() {
        let w = aggregation_weights(&[3, 5, 11, 2]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_mismatches() {
        let a = lin_shared(1, 2, &[0.0; 4]);
        let b = lin_shared(2, 2, &[0.0; 6]);
        assert!(aggregate_shared(&[a.clone(), b], &[1, 1]).is_err());
        assert!(aggregate_shared(&[a.clone()], &[1, 2]).is_err());
        assert!(aggregate_shared(&[a], &[0]).is_err());
        assert!(aggregate_shared(&[], &[]).is_err());
    }

    #[test]
    fn wire_payload_is_exactly_the_shared_part() {
        // CVAE transmits the decoder only; CGAN the generator only.
        let mut rng = RngStream::new(3, StreamId::new(0, 0, Purpose::Init));
        let cvae = CvaeParams::init(small_dims(), &mut rng).unwrap();
        let dec_len = cvae.decoder.param_count();
        let enc_len = cvae.encoder.param_count();
        let wire = SharedWeights::from_model(&ClientModel::Cvae(cvae));
        assert_eq!(wire.len(), dec_len);
        assert_ne!(wire.len(), dec_len + enc_len);

        let gdims = crate::models::CganDims { d: 4, k: 2, z_g: 3, g1: 8, g2: 8, f1: 8, f2: 8 };
        let cgan = crate::models::CganParams::init(gdims, &mut rng).unwrap();
        let gen_len = cgan.generator.param_count();
        let wire = SharedWeights::from_model(&ClientModel::Cgan(cgan));
        assert_eq!(wire.len(), gen_len);
    }

    #[test]
    fn zero_epochs_returns_global_unchanged() {
        let mut client = linear_client(0, 20, 11);
        let global = lin_shared(2, 2, &[0.5, -0.25, 0.75, 0.1, -0.6, 0.2]);
        let mut cfg = RoundConfig::new(ModelKind::Linear);
        cfg.local_epochs = 0;
        let (out, rep) = local_train(&mut client, &global, &cfg, 1, None).unwrap();
        assert_eq!(out.values(), global.values());
        assert_eq!(rep.steps, 0);
    }

    #[test]
    fn fedprox_mu_zero_matches_fedavg_bitwise() {
        let global = lin_shared(2, 2, &[0.0; 6]);
        let mut cfg = RoundConfig::new(ModelKind::Linear);
        cfg.rounds = 1;
        cfg.local_epochs = 2;

        let mut plain = linear_client(0, 20, 11);
        let (w_plain, _) = local_train(&mut plain, &global, &cfg, 1, None).unwrap();

        cfg.fedprox_mu = Some(0.0);
        let mut prox = linear_client(0, 20, 11);
        let (w_prox, _) = local_train(&mut prox, &global, &cfg, 1, None).unwrap();
        assert_eq!(w_plain.values(), w_prox.values());
    }

    #[test]
    fn fedprox_huge_mu_pins_weights_to_global() {
        // mu = 1e6 makes the proximal pull dominate: the client cannot
        // move meaningfully away from the broadcast weights.
        let global = lin_shared(2, 2, &[0.3, -0.2, 0.1, 0.05, -0.4, 0.25]);
        let mut cfg = RoundConfig::new(ModelKind::Linear);
        cfg.local_epochs = 5;
        cfg.fedprox_mu = Some(1e6);
        let mut client = linear_client(0, 40, 13);
        let (out, _) = local_train(&mut client, &global, &cfg, 1, None).unwrap();
        let max_dev = out
            .values()
            .iter()
            .zip(global.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-3, "max deviation {max_dev}");
    }

    #[test]
    fn local_cvae_loss_decreases_over_epochs() {
        let dims = small_dims();
        let mut client = cvae_client(0, 60, 7, dims);
        let global = SharedWeights::from_model(&client.model);
        let mut cfg = RoundConfig::new(ModelKind::Cvae);
        cfg.local_epochs = 5;
        cfg.learning_rate = 0.01;
        cfg.batch_size = 32;
        let (_, rep) = local_train(&mut client, &global, &cfg, 1, None).unwrap();
        assert_eq!(rep.epoch_losses.len(), 5);
        assert!(rep.epoch_losses.iter().all(|l| l.is_finite()));
        let first = rep.epoch_losses[0];
        let last = rep.epoch_losses[4];
        assert!(last < first, "loss should fall: first {first}, last {last}");
    }

    #[test]
    fn dp_training_accounts_once_per_step() {
        let dims = small_dims();
        let mut client = cvae_client(0, 20, 5, dims);
        let n = client.train.n();
        let global = SharedWeights::from_model(&client.model);
        let mut cfg = RoundConfig::new(ModelKind::Cvae);
        cfg.local_epochs = 2;
        cfg.batch_size = 20;
        cfg.dp = Some(DpConfig {
            epsilon_target: 25.0,
            delta: 1e-3,
            clip_norm: 1.0,
            noise_multiplier: 2.0,
            sample_rate: sample_rate(n, &cfg),
            planned_steps: planned_steps(n, &cfg),
        });
        client.accountant = Some(
            RdpAccountant::with_default_orders(sample_rate(n, &cfg), 2.0).unwrap(),
        );
        let mut obs = RecordingObserver::default();
        let (_, rep) = local_train(&mut client, &global, &cfg, 1, Some(&mut obs)).unwrap();
        assert!(rep.steps > 0);
        assert_eq!(client.accountant.as_ref().unwrap().steps_taken(), rep.steps);
        assert_eq!(obs.batches.len(), rep.steps as usize);
        for b in &obs.batches {
            assert!(b.batch_len >= 1);
            assert_eq!(b.sigma, 2.0);
            assert!(b.post_clip_norms.iter().all(|&p| p <= b.clip_norm + 1e-12));
        }
        let eps = rep.epsilon_spent.unwrap();
        assert!(eps.is_finite() && eps > 0.0 && eps <= 25.0);
    }

    #[test]
    fn empty_poisson_batches_skip_without_spending() {
        // q = 0.1 over 10 samples: many draws come back empty; those burn
        // no steps and no budget.
        let dims = small_dims();
        let mut client = cvae_client(0, 5, 9, dims);
        let n = client.train.n();
        assert_eq!(n, 10);
        let global = SharedWeights::from_model(&client.model);
        let mut cfg = RoundConfig::new(ModelKind::Cvae);
        cfg.local_epochs = 5;
        cfg.batch_size = 1;
        cfg.dp = Some(DpConfig {
            epsilon_target: 200.0,
            delta: 1e-3,
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            sample_rate: sample_rate(n, &cfg),
            planned_steps: planned_steps(n, &cfg),
        });
        client.accountant =
            Some(RdpAccountant::with_default_orders(sample_rate(n, &cfg), 1.0).unwrap());
        let (_, rep) = local_train(&mut client, &global, &cfg, 1, None).unwrap();
        // One call covers 5 epochs x 10 draws of Bernoulli(0.1) batches.
        assert!(rep.steps < 50, "some of the 50 draws must be empty, took {}", rep.steps);
        assert!(rep.steps > 0);
        assert_eq!(client.accountant.as_ref().unwrap().steps_taken(), rep.steps);
    }

    #[test]
    fn budget_fail_aborts_with_error() {
        let dims = small_dims();
        let mut client = cvae_client(0, 10, 3, dims);
        let n = client.train.n();
        let mut cfg = RoundConfig::new(ModelKind::Cvae);
        cfg.batch_size = n;
        cfg.dp = Some(DpConfig {
            epsilon_target: 0.05,
            delta: 1e-3,
            clip_norm: 1.0,
            noise_multiplier: 0.5,
            sample_rate: 1.0,
            planned_steps: planned_steps(n, &cfg),
        });
        client.accountant = Some(RdpAccountant::with_default_orders(1.0, 0.5).unwrap());
        let global = SharedWeights::from_model(&client.model);
        let err = local_train(&mut client, &global, &cfg, 1, None).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded(_)), "got {err:?}");
    }

    #[test]
    fn budget_warn_stops_early_and_keeps_global() {
        let dims = small_dims();
        let mut client = cvae_client(0, 10, 3, dims);
        let n = client.train.n();
        let mut cfg = RoundConfig::new(ModelKind::Cvae);
        cfg.batch_size = n;
        cfg.budget_policy = BudgetPolicy::Warn;
        cfg.dp = Some(DpConfig {
            epsilon_target: 0.05,
            delta: 1e-3,
            clip_norm: 1.0,
            noise_multiplier: 0.5,
            sample_rate: 1.0,
            planned_steps: planned_steps(n, &cfg),
        });
        client.accountant = Some(RdpAccountant::with_default_orders(1.0, 0.5).unwrap());
        let global = SharedWeights::from_model(&client.model);
        let (out, rep) = local_train(&mut client, &global, &cfg, 1, None).unwrap();
        assert!(rep.stopped_early);
        assert_eq!(rep.steps, 0);
        assert_eq!(out.values(), global.values());
        assert!(rep.warnings.iter().any(|w| w.contains("budget")));
    }

    fn small_linear_run(cfg: &RoundConfig, order: &[u64]) -> (Vec<f64>, Vec<RoundLogEntry>) {
        let mut clients: Vec<ClientState> =
            order.iter().map(|&id| linear_client(id, 10 + 5 * id as usize, 21)).collect();
        let (server, logs) = run_federated_training(&mut clients, cfg).unwrap();
        (server.global.values().to_vec(), logs)
    }

    #[test]
    fn run_is_invariant_to_client_slice_order() {
        let mut cfg = RoundConfig::new(ModelKind::Linear);
        cfg.rounds = 3;
        cfg.local_epochs = 2;
        let (w_fwd, logs_fwd) = small_linear_run(&cfg, &[0, 1, 2]);
        let (w_rev, logs_rev) = small_linear_run(&cfg, &[2, 0, 1]);
        assert_eq!(w_fwd, w_rev);
        assert_eq!(logs_fwd.len(), logs_rev.len());
        for (a, b) in logs_fwd.iter().zip(&logs_rev) {
            assert_eq!((a.round, a.client_id), (b.round, b.client_id));
            assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
        }
    }

    #[test]
    fn run_is_invariant_to_worker_count() {
        let mut cfg = RoundConfig::new(ModelKind::Linear);
        cfg.rounds = 2;
        cfg.local_epochs = 2;
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let (w1, _) = pool1.install(|| small_linear_run(&cfg, &[0, 1, 2, 3]));
        let (w4, _) = pool4.install(|| small_linear_run(&cfg, &[0, 1, 2, 3]));
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&w1), bits(&w4));
    }

    #[test]
    fn run_rejects_model_kind_mismatch() {
        let mut clients = vec![linear_client(0, 10, 1)];
        let cfg = RoundConfig::new(ModelKind::Cvae);
        assert!(matches!(
            run_federated_training(&mut clients, &cfg),
            Err(Error::Config(_))
        ));
        let mut none: Vec<ClientState> = Vec::new();
        let cfg = RoundConfig::new(ModelKind::Linear);
        assert!(run_federated_training(&mut none, &cfg).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let mut cfg = RoundConfig::new(ModelKind::Linear);
        assert!(cfg.validate().is_ok());
        cfg.fedprox_mu = Some(-1.0);
        assert!(cfg.validate().is_err());

        let mut cfg = RoundConfig::new(ModelKind::Cvae);
        cfg.fedprox_mu = Some(0.01);
        assert!(cfg.validate().is_err(), "fedprox requires a classifier");

        let mut cfg = RoundConfig::new(ModelKind::Linear);
        cfg.dp = Some(DpConfig {
            epsilon_target: 1.0,
            delta: 1e-5,
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            sample_rate: 0.1,
            planned_steps: 10,
        });
        assert!(cfg.validate().is_err(), "classifiers train without DP");

        let mut cfg = RoundConfig::new(ModelKind::Linear);
        cfg.rounds = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn planned_steps_counts_poisson_draws() {
        let mut cfg = RoundConfig::new(ModelKind::Cvae);
        cfg.rounds = 3;
        cfg.local_epochs = 2;
        cfg.batch_size = 64;
        assert_eq!(planned_steps(100, &cfg), 3 * 2 * 2);
        assert_eq!(planned_steps(64, &cfg), 3 * 2);
        assert_eq!(planned_steps(1, &cfg), 6);
        assert!((sample_rate(100, &cfg) - 0.64).abs() < 1e-15);
        assert_eq!(sample_rate(10, &cfg), 1.0);
    }
}
