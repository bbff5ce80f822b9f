//! End-to-end protocol run: register, upload, federated rounds, unlearning
//! request, verification and commit, then the retrain baseline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chaincode::{ChaincodeConfig, ChaincodeError, PayloadMode};
use crate::clock::LatencyProfile;
use crate::fedcore::{self, Agent, ClientState, Network, RoundConfig, RoundReport};
use crate::ledger::canonical::Hash32;
use crate::ledger::{export, TxId};
use crate::par::Exec;
use crate::seed;
use crate::tinylm::{Example, LoraConfig, Model, ModelConfig};
use crate::unlearner::{self, UnlearnConfig, UnlearnReport, ValidationSet, VerificationCriteria};

use super::corpus::{self, Sample};
use super::timecost::time_cost_model;
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic,
    /// Rows are dealt to clients in file order, then to validation.
    Csv {
        path: PathBuf,
        text_column: String,
        label_column: String,
        #[serde(default)]
        limit: Option<usize>,
    },
}

/// Cartesian grid of adapter hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraGrid {
    pub r: Vec<usize>,
    pub alpha: Vec<f64>,
    pub dropout: Vec<f64>,
}

impl Default for LoraGrid {
    fn default() -> Self {
        LoraGrid {
            r: vec![4, 8, 16],
            alpha: vec![1.0, 2.0, 4.0],
            dropout: vec![0.1, 0.3, 0.5],
        }
    }
}

impl LoraGrid {
    /// All configs, `r` outermost, then `alpha`, then `dropout`.
    pub fn configs(&self) -> Vec<LoraConfig> {
        let mut out = Vec::new();
        for &r in &self.r {
            for &alpha in &self.alpha {
                for &dropout in &self.dropout {
                    out.push(LoraConfig::new(r, alpha, dropout));
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty() || self.alpha.is_empty() || self.dropout.is_empty()
    }
}

fn default_train_lora() -> Option<LoraConfig> {
    Some(LoraConfig::new(4, 8.0, 0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_clients: usize,
    pub samples_per_client: usize,
    pub validation_samples: usize,
    pub class_balance: f64,
    pub rounds: usize,
    pub round: RoundConfig,
    pub model: ModelConfig,
    /// Adapter trained during federation; `None` trains nothing unless
    /// `round.trainable` is `all_weights`.
    #[serde(default = "default_train_lora")]
    pub train_lora: Option<LoraConfig>,
    pub unlearn: UnlearnConfig,
    pub grid: LoraGrid,
    /// Client whose data is forgotten; defaults to the last client.
    pub forget_client: Option<String>,
    /// Leading fraction of the forget client's data to forget.
    pub forget_fraction: f64,
    pub seeds: Vec<u64>,
    pub latency: String,
    pub corpus: CorpusSource,
    pub criteria: VerificationCriteria,
    pub payloads: PayloadMode,
    /// Also run the retrain-from-scratch baseline.
    pub baseline: bool,
    pub exec: Exec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_clients: 4,
            samples_per_client: 200,
            validation_samples: 400,
            class_balance: 0.5,
            rounds: 30,
            round: RoundConfig::default(),
            model: ModelConfig::default(),
            train_lora: default_train_lora(),
            unlearn: UnlearnConfig::default(),
            grid: LoraGrid::default(),
            forget_client: None,
            forget_fraction: 1.0,
            seeds: vec![0, 1, 2, 3, 4],
            latency: "paper".into(),
            corpus: CorpusSource::Synthetic,
            criteria: VerificationCriteria::default(),
            payloads: PayloadMode::Full,
            baseline: true,
            exec: Exec::Parallel,
        }
    }
}

pub const AGENT_ID: &str = "agent";

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_owned()));
        if self.n_clients == 0 {
            return bad("n_clients must be >= 1");
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if self.grid.is_empty() {
            return bad("LoRA grid must be non-empty");
        }
        if self.samples_per_client < 2 || self.validation_samples == 0 {
            return bad("need >= 2 samples per client and a validation set");
        }
        if !(self.forget_fraction > 0.0 && self.forget_fraction <= 1.0) {
            return bad("forget_fraction must be in (0, 1]");
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        if !self.criteria.is_valid() {
            return bad("tau_forget must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return bad("class_balance must be in [0, 1]");
        }
        if !self.client_ids().contains(&self.forget_id()) {
            return bad("forget_client is not one of the clients");
        }
        self.latency_profile()?;
        self.model
            .validate()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        self.round
            .validate()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn latency_profile(&self) -> Result<LatencyProfile, HarnessError> {
        LatencyProfile::by_name(&self.latency)
            .ok_or_else(|| HarnessError::InvalidConfig(format!("unknown latency profile {:?}", self.latency)))
    }

    pub fn client_ids(&self) -> Vec<String> {
        (0..self.n_clients).map(|i| format!("client-{i}")).collect()
    }

    pub fn forget_id(&self) -> String {
        self.forget_client
            .clone()
            .unwrap_or_else(|| format!("client-{}", self.n_clients.saturating_sub(1)))
    }

    /// Model config with its seed tied to the run seed.
    pub fn model_for(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            seed: seed::derive("harness/model", &[seed, self.model.seed]),
            ..self.model
        }
    }

    pub fn round_for(&self, seed: u64) -> RoundConfig {
        RoundConfig {
            seed: seed::derive("harness/round", &[seed, self.round.seed]),
            ..self.round.clone()
        }
    }
}

/// Per-client corpora and the validation set for one seed.
pub struct Corpora {
    pub clients: Vec<(String, Vec<Sample>)>,
    pub validation: Vec<Sample>,
}

/// Synthetic corpora: a flipped corpus for the forget client, planted-rule
/// corpora for everyone else and for validation.
pub fn build_corpora(cfg: &ScenarioConfig, seed: u64) -> Result<Corpora, HarnessError> {
    let forget = cfg.forget_id();
    match &cfg.corpus {
        CorpusSource::Synthetic => {
            let clients = cfg
                .client_ids()
                .into_iter()
                .map(|id| {
                    let s = seed::derive(&format!("harness/corpus/{id}"), &[seed]);
                    let data = if id == forget {
                        corpus::generate_flipped_corpus(s, cfg.samples_per_client, cfg.class_balance)
                    } else {
                        corpus::generate_corpus(s, cfg.samples_per_client, cfg.class_balance)
                    };
                    (id, data)
                })
                .collect();
            let validation = corpus::generate_corpus(
                seed::derive("harness/validation", &[seed]),
                cfg.validation_samples,
                cfg.class_balance,
            );
            Ok(Corpora { clients, validation })
        }
        CorpusSource::Csv {
            path,
            text_column,
            label_column,
            limit,
        } => {
            let rows = corpus::load_csv_corpus(path, text_column, label_column, *limit)?;
            let need = cfg.n_clients * cfg.samples_per_client + cfg.validation_samples;
            if rows.len() < need {
                return Err(HarnessError::InvalidConfig(format!(
                    "csv corpus has {} rows, scenario needs {need}",
                    rows.len()
                )));
            }
            let mut chunks = rows.chunks(cfg.samples_per_client);
            let clients = cfg
                .client_ids()
                .into_iter()
                .map(|id| (id, chunks.next().expect("enough rows").to_vec()))
                .collect();
            let start = cfg.n_clients * cfg.samples_per_client;
            Ok(Corpora {
                clients,
                validation: rows[start..start + cfg.validation_samples].to_vec(),
            })
        }
    }
}

/// A registered deployment with its global model uploaded.
pub struct Federation {
    pub net: Network,
    pub agent: Agent,
    pub clients: Vec<ClientState>,
    pub forget_id: String,
    /// Harness-side copy of the data to forget, for scoring only.
    pub forget_data: Vec<Example>,
    pub retain_data: Vec<(String, Vec<Example>)>,
    pub validation: Vec<Example>,
    pub rounds: Vec<RoundReport>,
}

impl Federation {
    /// Registers the agent and all clients and uploads the initial model.
    pub fn setup(cfg: &ScenarioConfig, seed: u64) -> Result<Federation, HarnessError> {
        cfg.validate()?;
        let corpora = build_corpora(cfg, seed)?;
        let max_len = cfg.model.max_len;
        let mut net = Network::new(
            seed::derive("harness/keys", &[seed]),
            cfg.latency_profile()?,
            ChaincodeConfig { payloads: cfg.payloads },
        );
        let agent = net.register_agent(AGENT_ID)?;
        let forget_id = cfg.forget_id();
        let mut clients = Vec::with_capacity(cfg.n_clients);
        let mut forget_data = Vec::new();
        let mut retain_data = Vec::new();
        for (id, samples) in &corpora.clients {
            let examples = corpus::to_examples(samples, max_len);
            if *id == forget_id {
                let n = (examples.len() as f64 * cfg.forget_fraction).ceil() as usize;
                forget_data = examples[..n.min(examples.len())].to_vec();
                if n < examples.len() {
                    retain_data.push((id.clone(), examples[n..].to_vec()));
                }
            } else {
                retain_data.push((id.clone(), examples.clone()));
            }
            clients.push(net.register_client(id, examples)?);
        }
        let model = fedcore::initial_model(cfg.model_for(seed), cfg.train_lora.as_ref())?;
        net.upload(&agent, &model)?;
        Ok(Federation {
            net,
            agent,
            clients,
            forget_id,
            forget_data,
            retain_data,
            validation: corpus::to_examples(&corpora.validation, max_len),
            rounds: Vec::new(),
        })
    }

    /// Re-issues every token at the current simulated time.
    pub fn refresh_tokens(&mut self) -> Result<(), HarnessError> {
        let (now, ttl) = (self.net.clock.now(), self.net.pool.ttl_s());
        self.agent.refresh_token(now, ttl)?;
        for c in &mut self.clients {
            c.refresh_token(now, ttl)?;
        }
        Ok(())
    }

    /// Runs `n` more rounds. Rounds are numbered by the model version they
    /// start from, so training resumes correctly on a replayed network.
    pub fn train(&mut self, cfg: &RoundConfig, n: usize, exec: Exec) -> Result<(), HarnessError> {
        for _ in 0..n {
            self.refresh_tokens()?;
            let round = self.net.version().ok_or(ChaincodeError::NoGlobalModel)?;
            let report = fedcore::run_round(
                &mut self.net,
                &self.agent,
                &mut self.clients,
                round,
                cfg,
                &self.validation,
                exec,
            )?;
            self.rounds.push(report);
        }
        Ok(())
    }

    pub fn forget_client(&self) -> &ClientState {
        self.clients
            .iter()
            .find(|c| c.c_id() == self.forget_id)
            .expect("forget client is registered")
    }

    pub fn global(&self) -> Result<(Model, u64), HarnessError> {
        let version = self.net.version().ok_or(ChaincodeError::NoGlobalModel)?;
        Ok((self.net.global_model()?, version))
    }

    /// Runs the unlearning request of the forget client against the current
    /// global model.
    pub fn unlearn(&self, config: &UnlearnConfig, seed: u64, fraction: f64, exec: Exec) -> Result<UnlearnReport, HarnessError> {
        let (global, version) = self.global()?;
        let req = self
            .forget_client()
            .forget_request(config.clone(), version, seed::derive("harness/unlearn", &[seed]), fraction);
        Ok(unlearner::unlearn(&global, version, &req, &self.validation, exec)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CommitStatus {
    Committed { t_id: TxId },
    CriteriaNotMet { reasons: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineSummary {
    pub acc_forget: f64,
    pub acc_retain: f64,
    pub grad_steps: u64,
    pub rounds: usize,
    pub sim_time_s: f64,
    pub model_digest: Hash32,
}

/// One row of the unlearn vs. retrain comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub acc_forget_before: f64,
    pub acc_forget_after: f64,
    pub acc_retain_after: f64,
    pub grad_steps: u64,
    pub sim_time_s: f64,
}

pub struct ScenarioOutcome {
    pub seed: u64,
    pub rounds: Vec<RoundReport>,
    pub unlearn: UnlearnReport,
    pub commit: CommitStatus,
    pub baseline: Option<BaselineSummary>,
    pub comparison: Vec<ComparisonRow>,
    pub network: Network,
    pub ledger_jsonl: String,
    pub metrics_csv: Vec<u8>,
}

impl ScenarioOutcome {
    /// Digest of the latest committed global model.
    pub fn final_model_digest(&self) -> Option<Hash32> {
        self.network.contract.latest().map(|r| r.weights_digest)
    }

    pub fn comparison_csv(&self) -> Result<Vec<u8>, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.comparison {
            w.serialize(row)?;
        }
        w.into_inner().map_err(|e| HarnessError::IoError(e.to_string()))
    }

    /// Writes `ledger.jsonl`, `metrics.csv`, `comparison.csv` and
    /// `unlearn_report.json` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        fs::create_dir_all(dir)?;
        let files = [
            ("ledger.jsonl", self.ledger_jsonl.as_bytes().to_vec()),
            ("metrics.csv", self.metrics_csv.clone()),
            ("comparison.csv", self.comparison_csv()?),
            ("unlearn_report.json", serde_json::to_vec_pretty(&self.unlearn)?),
        ];
        let mut out = Vec::new();
        for (name, bytes) in files {
            let p = dir.join(name);
            fs::write(&p, bytes)?;
            out.push(p);
        }
        Ok(out)
    }
}

fn lora_label(l: &LoraConfig) -> String {
    format!("unlearn r={} alpha={} dropout={}", l.r, l.alpha, l.dropout)
}

/// Runs the whole protocol for one seed. A verification failure is not an
/// error: it is reported through [`CommitStatus::CriteriaNotMet`] and no
/// unlearning transaction is written.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<ScenarioOutcome, HarnessError> {
    let exec = cfg.exec;
    let mut fed = Federation::setup(cfg, seed)?;
    let round_cfg = cfg.round_for(seed);
    fed.train(&round_cfg, cfg.rounds, exec)?;

    let start = fed.net.clock.now();
    let report = fed.unlearn(&cfg.unlearn, seed, cfg.forget_fraction, exec)?;
    fed.net.clock.advance(fed.net.latency.epoch_s * report.epochs_run as f64);
    fed.refresh_tokens()?;
    fed.net.tick_tx();
    let now = fed.net.tick_tx();
    let forget_token = fed.forget_client().token.clone();
    let data = ValidationSet {
        forget: &fed.forget_data,
        retain: &fed.validation,
    };
    let commit = match fed.net.contract.commit_unlearning_result(
        &fed.net.pool,
        &mut fed.net.chain,
        &forget_token,
        &report,
        &cfg.criteria,
        data,
        exec,
        now,
    ) {
        Ok(t_id) => CommitStatus::Committed { t_id },
        Err(ChaincodeError::CriteriaNotMet { reasons, .. }) => CommitStatus::CriteriaNotMet { reasons },
        Err(e) => return Err(e.into()),
    };
    let unlearn_time = fed.net.clock.now() - start;

    let mut comparison = vec![ComparisonRow {
        method: lora_label(&report.lora),
        acc_forget_before: report.acc_forget_before,
        acc_forget_after: report.acc_forget_after,
        acc_retain_after: report.acc_retain_after,
        grad_steps: report.grad_steps,
        sim_time_s: unlearn_time,
    }];
    let baseline = if cfg.baseline {
        let b = unlearner::retrain_baseline(
            fed.retain_data.clone(),
            cfg.model_for(seed),
            cfg.train_lora.clone(),
            &round_cfg,
            cfg.rounds,
            seed,
            ValidationSet {
                forget: &fed.forget_data,
                retain: &fed.validation,
            },
            exec,
        )?;
        let profile = cfg.latency_profile()?;
        let txs = fed.retain_data.len() as u64 + 1;
        let summary = BaselineSummary {
            acc_forget: b.acc_forget,
            acc_retain: b.acc_retain,
            grad_steps: b.grad_steps,
            rounds: b.rounds,
            sim_time_s: time_cost_model(&profile, b.rounds as u64, txs).enhanced_s,
            model_digest: b.model.digest(),
        };
        comparison.push(ComparisonRow {
            method: "retrain_from_scratch".into(),
            acc_forget_before: report.acc_forget_before,
            acc_forget_after: b.acc_forget,
            acc_retain_after: b.acc_retain,
            grad_steps: b.grad_steps,
            sim_time_s: summary.sim_time_s,
        });
        Some(summary)
    } else {
        None
    };

    let mut metrics_csv = Vec::new();
    fedcore::write_metrics_csv(&fed.rounds, &mut metrics_csv)?;
    Ok(ScenarioOutcome {
        seed,
        rounds: fed.rounds,
        unlearn: report,
        commit,
        baseline,
        comparison,
        ledger_jsonl: export::to_jsonl(&fed.net.chain),
        network: fed.net,
        metrics_csv,
    })
}
