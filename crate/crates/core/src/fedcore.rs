//! Federated training: local client training, weighted aggregation and the
//! round protocol between clients, the agent and the chaincode.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::chaincode::{Chaincode, ChaincodeConfig, ChaincodeError, Submission, UpdateKind};
use crate::clock::{LatencyProfile, SimClock};
use crate::identity::{
    generate_token, register_client, AuthToken, IdentityError, KeyPair, RegisterOutcome, Role, UserPool,
};
use crate::ledger::canonical::Hash32;
use crate::ledger::{ChainState, TxId};
use crate::par::{self, Exec};
use crate::seed;
use crate::tinylm::{
    Direction, DropoutMode, Example, LoraAdapter, LoraConfig, Model, ModelConfig, ModelError, Trainable, Weights,
};
use crate::unlearner::{ForgetRequest, UnlearnConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FedError {
    #[error("client dataset is empty")]
    EmptyDataset,
    #[error("no updates to aggregate")]
    EmptyUpdateSet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("client {0} appears twice in one aggregation")]
    DuplicateClient(String),
    #[error("identity {0} is already registered")]
    AlreadyRegistered(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Chaincode(#[from] ChaincodeError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_clip() -> Option<f64> {
    Some(crate::tinylm::DEFAULT_CLIP)
}

/// Local training settings shared by all clients in a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
    pub trainable: Trainable,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            epochs: 1,
            eta: 0.5,
            batch_size: 20,
            clip: default_clip(),
            trainable: Trainable::AdaptersOnly,
            seed: 0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.batch_size == 0 {
            return Err(FedError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(FedError::InvalidConfig(format!("eta {}", self.eta)));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(FedError::InvalidConfig("clip must be positive".into()));
        }
        Ok(())
    }

    pub fn update_kind(&self) -> UpdateKind {
        match self.trainable {
            Trainable::AdaptersOnly => UpdateKind::Adapter,
            Trainable::AllWeights => UpdateKind::Full,
        }
    }
}

/// Global model before any round: seeded base weights plus, optionally, a
/// fresh training adapter.
pub fn initial_model(config: ModelConfig, train_lora: Option<&LoraConfig>) -> Result<Model, FedError> {
    let weights = Weights::init(config)?;
    let adapter = match train_lora {
        Some(l) => Some(LoraAdapter::init(
            l.clone(),
            config.d_model,
            seed::derive("fedcore/train-adapter", &[config.seed]),
        )?),
        None => None,
    };
    Ok(Model::new(weights, adapter)?)
}

/// Parameters covered by an update of `kind`, flattened.
pub fn model_params(model: &Model, kind: UpdateKind) -> Result<Vec<f64>, FedError> {
    let adapter = || model.adapter.as_ref().map(|a| a.to_flat());
    match kind {
        UpdateKind::Adapter => adapter().ok_or(FedError::Model(ModelError::NoAdapter)),
        UpdateKind::Full => {
            let mut v = model.weights.to_flat();
            v.extend(adapter().unwrap_or_default());
            Ok(v)
        }
    }
}

/// `model + delta` over the coordinates of `kind`.
pub fn apply_delta(model: &Model, kind: UpdateKind, delta: &[f64]) -> Result<Model, FedError> {
    let params = model_params(model, kind)?;
    if params.len() != delta.len() {
        return Err(FedError::ShapeMismatch(format!(
            "delta of {} for {} parameters",
            delta.len(),
            params.len()
        )));
    }
    let next: Vec<f64> = params.iter().zip(delta).map(|(p, d)| p + d).collect();
    let mut out = model.clone();
    let n_w = out.weights.num_params();
    match kind {
        UpdateKind::Adapter => out.adapter.as_mut().ok_or(ModelError::NoAdapter)?.set_flat(&next)?,
        UpdateKind::Full => {
            out.weights.set_flat(&next[..n_w])?;
            if let Some(a) = out.adapter.as_mut() {
                a.set_flat(&next[n_w..])?;
            }
        }
    }
    Ok(out)
}

/// One client's contribution to aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub client: String,
    pub delta: Vec<f64>,
    pub sample_count: u64,
}

/// Sample-weighted mean of the updates, `p_i = n_i / sum(n)`.
///
/// Terms are summed pairwise in `client` order, so the result does not
/// depend on the order of `updates`.
pub fn aggregate(updates: &[Update]) -> Result<Vec<f64>, FedError> {
    let first = updates.first().ok_or(FedError::EmptyUpdateSet)?;
    let dim = first.delta.len();
    let mut order: Vec<&Update> = updates.iter().collect();
    order.sort_by(|a, b| a.client.cmp(&b.client));
    for w in order.windows(2) {
        if w[0].client == w[1].client {
            return Err(FedError::DuplicateClient(w[0].client.clone()));
        }
    }
    if let Some(u) = order.iter().find(|u| u.delta.len() != dim) {
        return Err(FedError::ShapeMismatch(format!(
            "update from {} has {} values, expected {dim}",
            u.client,
            u.delta.len()
        )));
    }
    if let Some(u) = order.iter().find(|u| u.sample_count == 0) {
        return Err(FedError::InvalidConfig(format!("update from {} has sample_count 0", u.client)));
    }
    let total: u64 = order.iter().map(|u| u.sample_count).sum();
    let terms: Vec<Vec<f64>> = order
        .iter()
        .map(|u| {
            let p = u.sample_count as f64 / total as f64;
            u.delta.iter().map(|v| p * v).collect()
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

fn pairwise_sum(terms: &[Vec<f64>]) -> Vec<f64> {
    match terms {
        [one] => one.clone(),
        _ => {
            let (l, r) = terms.split_at(terms.len() / 2);
            let mut out = pairwise_sum(l);
            out.iter_mut().zip(pairwise_sum(r)).for_each(|(a, b)| *a += b);
            out
        }
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub kind: UpdateKind,
    pub delta: Vec<f64>,
    /// Mean mini-batch loss of the last epoch (eval loss when `epochs == 0`).
    pub loss: f64,
    /// Accuracy on the client's own data after training.
    pub accuracy: f64,
    pub steps: u64,
    pub sample_count: u64,
}

/// A client with its private dataset. The data never leaves this struct:
/// only deltas and metrics do.
#[derive(Debug, Clone)]
pub struct ClientState {
    c_id: String,
    keys: KeyPair,
    pub token: AuthToken,
    data: Vec<Example>,
}

impl ClientState {
    pub fn new(c_id: &str, keys: KeyPair, token: AuthToken, data: Vec<Example>) -> Result<ClientState, FedError> {
        if data.is_empty() {
            return Err(FedError::EmptyDataset);
        }
        Ok(ClientState {
            c_id: c_id.to_owned(),
            keys,
            token,
            data,
        })
    }

    pub fn c_id(&self) -> &str {
        &self.c_id
    }

    pub fn sample_count(&self) -> u64 {
        self.data.len() as u64
    }

    /// Self-issues a new token with the client's own key.
    pub fn refresh_token(&mut self, now_s: f64, ttl_s: f64) -> Result<(), FedError> {
        self.token = generate_token(&self.keys, &self.c_id, Role::Client, now_s, ttl_s)?;
        Ok(())
    }

    /// Builds a request to forget the first `fraction` of this client's
    /// data (rounded up; `1.0` is the whole dataset).
    pub fn forget_request(&self, config: UnlearnConfig, base_version: u64, seed: u64, fraction: f64) -> ForgetRequest {
        let n = (self.data.len() as f64 * fraction.clamp(0.0, 1.0)).ceil() as usize;
        ForgetRequest {
            requester: self.c_id.clone(),
            forget: self.data[..n.min(self.data.len())].to_vec(),
            config,
            base_version,
            seed,
        }
    }

    /// Copies `global`, runs `cfg.epochs` passes of mini-batch SGD on the
    /// private data and returns the parameter delta.
    pub fn local_train(&self, global: &Model, cfg: &RoundConfig, round: u64, exec: Exec) -> Result<LocalUpdate, FedError> {
        cfg.validate()?;
        let kind = cfg.update_kind();
        let start = model_params(global, kind)?;
        let mut local = global.clone();
        let client_key = seed::derive(&format!("fedcore/client/{}", self.c_id), &[]);
        let dropout_seed = seed::derive("fedcore/dropout", &[cfg.seed, round, client_key]);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut steps = 0u64;
        let mut last_loss = None;
        for epoch in 0..cfg.epochs {
            let mut rng = seed::rng("fedcore/shuffle", &[cfg.seed, round, client_key, epoch as u64]);
            order.shuffle(&mut rng);
            let (mut sum, mut n) = (0.0, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<Example> = chunk.iter().map(|&i| self.data[i].clone()).collect();
                let mode = DropoutMode::Train {
                    seed: dropout_seed,
                    step: steps,
                };
                let (loss, grads) = local.loss_and_grad(&batch, cfg.trainable, mode, exec)?;
                local.step(&grads, cfg.eta, Direction::Descent, cfg.clip)?;
                sum += loss;
                n += 1;
                steps += 1;
            }
            last_loss = Some(sum / n as f64);
        }
        let end = model_params(&local, kind)?;
        let loss = match last_loss {
            Some(l) => l,
            None => local.mean_loss(&self.data, exec)?,
        };
        Ok(LocalUpdate {
            kind,
            delta: end.iter().zip(&start).map(|(a, b)| a - b).collect(),
            loss,
            accuracy: local.accuracy(&self.data, exec)?,
            steps,
            sample_count: self.sample_count(),
        })
    }
}

/// The aggregating agent's identity.
#[derive(Debug, Clone)]
pub struct Agent {
    pub id: String,
    keys: KeyPair,
    pub token: AuthToken,
}

impl Agent {
    pub fn new(id: &str, keys: KeyPair, token: AuthToken) -> Agent {
        Agent {
            id: id.to_owned(),
            keys,
            token,
        }
    }

    pub fn refresh_token(&mut self, now_s: f64, ttl_s: f64) -> Result<(), FedError> {
        self.token = generate_token(&self.keys, &self.id, Role::Agent, now_s, ttl_s)?;
        Ok(())
    }
}

/// Ledger, identity pool, contract and simulated clock of one deployment.
#[derive(Debug, Clone)]
pub struct Network {
    pub chain: ChainState,
    pub pool: UserPool,
    pub contract: Chaincode,
    pub clock: SimClock,
    pub latency: LatencyProfile,
}

impl Network {
    /// A fresh deployment; the clock starts after setup and the first
    /// consensus round.
    pub fn new(key_seed: u64, latency: LatencyProfile, config: ChaincodeConfig) -> Network {
        let mut clock = SimClock::new();
        clock.advance(latency.setup_s + latency.consensus_s);
        Network {
            chain: ChainState::new(),
            pool: UserPool::new(key_seed),
            contract: Chaincode::new(config),
            clock,
            latency,
        }
    }

    /// Advances the clock by one transaction and returns the new time.
    pub fn tick_tx(&mut self) -> f64 {
        self.clock.advance(self.latency.tx_s)
    }

    fn register(&mut self, id: &str, role: Role) -> Result<(AuthToken, KeyPair), FedError> {
        let now = self.tick_tx();
        match register_client(&mut self.pool, &mut self.chain, id, role, now)? {
            RegisterOutcome::RegisterSuccess { token, keys } => Ok((token, keys)),
            RegisterOutcome::AlreadyExists => Err(FedError::AlreadyRegistered(id.to_owned())),
        }
    }

    pub fn register_agent(&mut self, id: &str) -> Result<Agent, FedError> {
        let (token, keys) = self.register(id, Role::Agent)?;
        Ok(Agent::new(id, keys, token))
    }

    pub fn register_client(&mut self, id: &str, data: Vec<Example>) -> Result<ClientState, FedError> {
        if data.is_empty() {
            return Err(FedError::EmptyDataset);
        }
        let (token, keys) = self.register(id, Role::Client)?;
        ClientState::new(id, keys, token, data)
    }

    pub fn upload(&mut self, agent: &Agent, model: &Model) -> Result<(u64, TxId), FedError> {
        let now = self.tick_tx();
        Ok(self.contract.upload_global_model(&self.pool, &mut self.chain, &agent.token, model, now)?)
    }

    pub fn global_model(&self) -> Result<Model, FedError> {
        Ok(self.contract.global_model()?)
    }

    pub fn version(&self) -> Option<u64> {
        self.contract.latest().map(|r| r.version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRoundEntry {
    pub c_id: String,
    pub loss: f64,
    pub accuracy: f64,
    pub update_digest: Hash32,
    pub t_id: Option<TxId>,
    /// Why the client was left out of aggregation, if it was.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u64,
    pub clients: Vec<ClientRoundEntry>,
    pub global_accuracy: Option<f64>,
    pub version: u64,
    pub aggregation_t_id: TxId,
    pub grad_steps: u64,
    pub sim_time_s: f64,
}

/// One federated round: local training, update recording in `c_id` order,
/// release to the agent, aggregation and commit.
///
/// Clients whose submission is refused (bad token, duplicate, invalid
/// update) are skipped and flagged in the report.
pub fn run_round(
    net: &mut Network,
    agent: &Agent,
    clients: &mut [ClientState],
    round: u64,
    cfg: &RoundConfig,
    validation: &[Example],
    exec: Exec,
) -> Result<RoundReport, FedError> {
    cfg.validate()?;
    let global = net.global_model()?;
    let kind = cfg.update_kind();
    net.clock.advance(net.latency.epoch_s * cfg.epochs.max(1) as f64);

    let updates = par::map(exec, clients, |_, c| c.local_train(&global, cfg, round, exec))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut idx: Vec<usize> = (0..clients.len()).collect();
    idx.sort_by(|&a, &b| clients[a].c_id.cmp(&clients[b].c_id));

    let mut entries = Vec::with_capacity(clients.len());
    for &i in &idx {
        let (c, u) = (&clients[i], &updates[i]);
        let now = net.tick_tx();
        let sub = Submission {
            client: c.c_id.clone(),
            round,
            kind,
            update: u.delta.clone(),
            sample_count: u.sample_count,
        };
        let (t_id, skipped) = match net.contract.record_client_update(&net.pool, &mut net.chain, &c.token, sub, now) {
            Ok(t) => (Some(t), None),
            Err(
                e @ (ChaincodeError::AuthError(_)
                | ChaincodeError::DuplicateSubmission { .. }
                | ChaincodeError::InvalidSubmission(_)),
            ) => (None, Some(e.to_string())),
            Err(e) => return Err(e.into()),
        };
        entries.push(ClientRoundEntry {
            c_id: c.c_id.clone(),
            loss: u.loss,
            accuracy: u.accuracy,
            update_digest: crate::chaincode::update_digest(&u.delta),
            t_id,
            skipped,
        });
    }

    let released = net
        .contract
        .release_parameters_to_agent(&net.pool, &agent.token, round, net.clock.now())?;
    let agg_input: Vec<Update> = released
        .into_iter()
        .map(|s| Update {
            client: s.client,
            delta: s.update,
            sample_count: s.sample_count,
        })
        .collect();
    let delta = aggregate(&agg_input)?;
    let next = apply_delta(&global, kind, &delta)?;
    let now = net.tick_tx();
    let (version, aggregation_t_id) =
        net.contract
            .commit_aggregated_model(&net.pool, &mut net.chain, &agent.token, &next, now)?;
    let global_accuracy = if validation.is_empty() {
        None
    } else {
        Some(next.accuracy(validation, exec)?)
    };
    Ok(RoundReport {
        round,
        clients: entries,
        global_accuracy,
        version,
        aggregation_t_id,
        grad_steps: updates.iter().map(|u| u.steps).sum(),
        sim_time_s: net.clock.now(),
    })
}

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    round: u64,
    client: &'a str,
    loss: f64,
    acc: f64,
    global_acc: String,
    t_id: String,
    aggregation_t_id: String,
    status: &'a str,
    sim_time_s: f64,
}

/// Per-client round metrics as CSV:
/// `round,client,loss,acc,global_acc,t_id,aggregation_t_id,status,sim_time_s`.
pub fn write_metrics_csv<W: Write>(reports: &[RoundReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for c in &r.clients {
            w.serialize(MetricsRow {
                round: r.round,
                client: &c.c_id,
                loss: c.loss,
                acc: c.accuracy,
                global_acc: r.global_accuracy.map(|a| a.to_string()).unwrap_or_default(),
                t_id: c.t_id.map(|t| t.to_hex()).unwrap_or_default(),
                aggregation_t_id: r.aggregation_t_id.to_hex(),
                status: if c.skipped.is_some() { "skipped" } else { "accepted" },
                sim_time_s: r.sim_time_s,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::TxKind;

    fn upd(client: &str, delta: Vec<f64>, n: u64) -> Update {
        Update {
            client: client.into(),
            delta,
            sample_count: n,
        }
    }

    #[test]
    fn aggregate_cases() {
        let out = aggregate(&[upd("a", vec![0.0, 4.0], 1), upd("b", vec![4.0, 0.0], 3)]).unwrap();
        assert_eq!(out, vec![3.0, 1.0]);
        let same = aggregate(&[upd("a", vec![0.3, -1.7], 5), upd("b", vec![0.3, -1.7], 5)]).unwrap();
        assert!(same.iter().zip([0.3, -1.7]).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(aggregate(&[upd("x", vec![1.5, 2.5], 7)]).unwrap(), vec![1.5, 2.5]);
        assert_eq!(aggregate(&[]), Err(FedError::EmptyUpdateSet));
        assert!(matches!(
            aggregate(&[upd("a", vec![1.0], 1), upd("b", vec![1.0, 2.0], 1)]),
            Err(FedError::ShapeMismatch(_))
        ));
        assert_eq!(
            aggregate(&[upd("a", vec![1.0], 1), upd("a", vec![1.0], 1)]),
            Err(FedError::DuplicateClient("a".into()))
        );
    }

    fn small_model() -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 8,
            max_len: 16,
            ..ModelConfig::default()
        };
        initial_model(cfg, Some(&LoraConfig::new(2, 4.0, 0.0))).unwrap()
    }

    fn data(flip: bool) -> Vec<Example> {
        ["JOY film", "BAD plot", "WOW end", "SAD cast"]
            .iter()
            .enumerate()
            .map(|(i, t)| Example::from_text(t, ((i + 1) % 2) ^ usize::from(flip), 16))
            .collect()
    }

    #[test]
    fn local_train_zero_epochs_and_determinism() {
        let g = small_model();
        let mut net = Network::new(1, LatencyProfile::ZERO, ChaincodeConfig::default());
        let c = net.register_client("c1", data(false)).unwrap();
        let zero = RoundConfig {
            epochs: 0,
            ..RoundConfig::default()
        };
        let u = c.local_train(&g, &zero, 0, Exec::Sequential).unwrap();
        assert!(u.delta.iter().all(|v| *v == 0.0));
        let cfg = RoundConfig {
            epochs: 3,
            batch_size: 2,
            ..RoundConfig::default()
        };
        let a = c.local_train(&g, &cfg, 0, Exec::Sequential).unwrap();
        let b = c.local_train(&g, &cfg, 0, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps, 6);
        assert!(a.delta.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn round_counts_and_skips_expired_clients() {
        let mut net = Network::new(1, LatencyProfile::PAPER, ChaincodeConfig::default());
        let agent = net.register_agent("agent").unwrap();
        let mut clients: Vec<ClientState> = (0..4)
            .map(|i| net.register_client(&format!("c{i}"), data(i == 3)).unwrap())
            .collect();
        net.upload(&agent, &small_model()).unwrap();
        let before = net.chain.transactions().count();
        let cfg = RoundConfig::default();
        let r = run_round(&mut net, &agent, &mut clients, 0, &cfg, &data(false), Exec::Sequential).unwrap();
        assert_eq!(net.chain.transactions().count() - before, 5);
        assert_eq!(r.version, 1);
        assert!(r.clients.iter().all(|c| c.skipped.is_none()));

        clients[2].token = generate_token(&crate::identity::key_generator(5), "c2", Role::Client, 0.0, 1.0).unwrap();
        let before = net.chain.transactions().count();
        let r = run_round(&mut net, &agent, &mut clients, 1, &cfg, &data(false), Exec::Sequential).unwrap();
        assert_eq!(net.chain.transactions().count() - before, 4);
        let flagged: Vec<&str> = r.clients.iter().filter(|c| c.skipped.is_some()).map(|c| c.c_id.as_str()).collect();
        assert_eq!(flagged, ["c2"]);
        assert_eq!(net.chain.count_kind(TxKind::AggregatedModel), 2);

        let mut csv = Vec::new();
        write_metrics_csv(&[r], &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("round,client,loss,acc,global_acc,t_id,aggregation_t_id,status,sim_time_s\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn identical_clients_keep_fixed_point() {
        let g = small_model();
        let mut net = Network::new(1, LatencyProfile::ZERO, ChaincodeConfig::default());
        let c = net.register_client("a", data(false)).unwrap();
        let u = c.local_train(&g, &RoundConfig::default(), 0, Exec::Sequential).unwrap();
        let agg = aggregate(&[upd("a", u.delta.clone(), 4), upd("b", u.delta.clone(), 4)]).unwrap();
        for (x, y) in agg.iter().zip(&u.delta) {
            assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
    }

    #[test]
    fn apply_delta_full_mode() {
        let g = small_model();
        let n = model_params(&g, UpdateKind::Full).unwrap().len();
        assert_eq!(n, g.weights.num_params() + g.adapter.as_ref().unwrap().num_params());
        let back = apply_delta(&g, UpdateKind::Full, &vec![0.0; n]).unwrap();
        assert_eq!(back, g);
        assert!(apply_delta(&g, UpdateKind::Adapter, &[1.0]).is_err());
    }
}
