//! Smart-contract state machine. Every successful operation that changes
//! state seals exactly one block, and [`Chaincode::replay`] rebuilds the
//! state from the ledger alone.
//!
//! Payloads are sorted-key JSON. Binary fields (model bytes, update vectors)
//! are base64 strings and are omitted in [`PayloadMode::DigestOnly`].

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::identity::{AuthToken, Role, TokenVerdict, UserPool};
use crate::ledger::canonical::{sorted_json, Hash32};
use crate::ledger::{ChainState, LedgerError, TxId, TxKind};
use crate::par::Exec;
use crate::tinylm::{Model, ModelError};
use crate::unlearner::{self, Measured, UnlearnReport, ValidationSet, VerificationCriteria, Verdict};

pub const AGENT_TOKEN_EXPIRED: &str = "Agent jwt token expired";
pub const CLIENT_IDENTITY_FALSE: &str = "Client identity check false";
pub const AGENT_IDENTITY_FALSE: &str = "Agent identity check false";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChaincodeError {
    #[error("{0}")]
    AuthError(&'static str),
    #[error("client {client} already submitted for round {round}")]
    DuplicateSubmission { client: String, round: u64 },
    #[error("no global model has been uploaded")]
    NoGlobalModel,
    #[error("unknown model version {0}")]
    UnknownVersion(u64),
    #[error("model version {0} is stored as a digest only")]
    MissingWeights(u64),
    #[error("invalid submission: {0}")]
    InvalidSubmission(String),
    #[error("verification criteria not met: {}", reasons.join("; "))]
    CriteriaNotMet {
        reasons: Vec<String>,
        measured: Option<Measured>,
    },
    #[error("malformed chaincode record: {0}")]
    MalformedRecord(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadMode {
    /// Full model bytes and update vectors on the ledger.
    #[default]
    Full,
    /// Digests only.
    DigestOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChaincodeConfig {
    #[serde(default)]
    pub payloads: PayloadMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModelRecord {
    pub version: u64,
    pub weights_digest: Hash32,
    /// [`Model::to_bytes`]; `None` when replayed from a digest-only ledger.
    pub weights: Option<Vec<u8>>,
    pub t_id: TxId,
}

impl GlobalModelRecord {
    pub fn model(&self) -> Result<Model, ChaincodeError> {
        let bytes = self.weights.as_ref().ok_or(ChaincodeError::MissingWeights(self.version))?;
        Ok(Model::from_bytes(bytes)?)
    }
}

/// What a client update carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    /// Adapter coordinates only.
    Adapter,
    /// Base weights followed by adapter coordinates.
    Full,
}

/// A client update as proposed, before it is recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub client: String,
    pub round: u64,
    pub kind: UpdateKind,
    pub update: Vec<f64>,
    pub sample_count: u64,
}

/// A recorded client update.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSubmission {
    pub client: String,
    pub round: u64,
    pub kind: UpdateKind,
    /// Empty when replayed from a digest-only ledger.
    pub update: Vec<f64>,
    pub update_digest: Hash32,
    pub sample_count: u64,
    pub t_id: TxId,
}

/// SHA-256 over the update values as consecutive `f64` LE.
pub fn update_digest(update: &[f64]) -> Hash32 {
    Hash32::of(&f64s_to_bytes(update))
}

fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_to_f64s(b: &[u8]) -> Option<Vec<f64>> {
    if b.len() % 8 != 0 {
        return None;
    }
    Some(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnRecord {
    pub report: UnlearnReport,
    pub unlearned_digest: Hash32,
    pub criteria: VerificationCriteria,
    pub measured: Measured,
    pub t_id: TxId,
    pub verification_t_id: TxId,
}

#[derive(Serialize, Deserialize)]
struct ModelPayload {
    version: u64,
    weights_digest: Hash32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct SubmissionPayload {
    client: String,
    round: u64,
    kind: UpdateKind,
    sample_count: u64,
    update_digest: Hash32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    update: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct UnlearnPayload {
    report: UnlearnReport,
    unlearned_digest: Hash32,
}

#[derive(Serialize, Deserialize)]
struct VerificationPayload {
    unlearn_t_id: TxId,
    criteria: VerificationCriteria,
    measured: Measured,
    verdict: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Chaincode {
    config: ChaincodeConfig,
    models: Vec<GlobalModelRecord>,
    submissions: BTreeMap<u64, Vec<ParameterSubmission>>,
    unlearned: Vec<UnlearnRecord>,
}

fn authorize(pool: &UserPool, token: &AuthToken, role: Role, now_s: f64, msg: &'static str) -> Result<String, ChaincodeError> {
    match pool.verify_token(token, now_s) {
        TokenVerdict::Ok { subject, role: r } if r == role => Ok(subject),
        _ => Err(ChaincodeError::AuthError(msg)),
    }
}

impl Chaincode {
    pub fn new(config: ChaincodeConfig) -> Self {
        Chaincode {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> ChaincodeConfig {
        self.config
    }

    pub fn models(&self) -> &[GlobalModelRecord] {
        &self.models
    }

    pub fn latest(&self) -> Option<&GlobalModelRecord> {
        self.models.last()
    }

    pub fn model_record(&self, version: u64) -> Option<&GlobalModelRecord> {
        self.models.get(usize::try_from(version).ok()?)
    }

    /// The current global model, decoded.
    pub fn global_model(&self) -> Result<Model, ChaincodeError> {
        self.latest().ok_or(ChaincodeError::NoGlobalModel)?.model()
    }

    pub fn submissions(&self, round: u64) -> &[ParameterSubmission] {
        self.submissions.get(&round).map_or(&[], |v| v.as_slice())
    }

    pub fn unlearned(&self) -> &[UnlearnRecord] {
        &self.unlearned
    }

    fn model_payload(&self, version: u64, bytes: &[u8], digest: Hash32) -> Vec<u8> {
        sorted_json(&ModelPayload {
            version,
            weights_digest: digest,
            weights: (self.config.payloads == PayloadMode::Full).then(|| B64.encode(bytes)),
        })
    }

    fn commit_model(
        &mut self,
        chain: &mut ChainState,
        kind: TxKind,
        submitter: &str,
        model: &Model,
        now_s: f64,
    ) -> Result<(u64, TxId), ChaincodeError> {
        let bytes = model.to_bytes();
        let digest = Hash32::of(&bytes);
        let version = self.models.len() as u64;
        let t_id = chain.submit_transaction(kind, submitter, self.model_payload(version, &bytes, digest), now_s)?;
        chain.seal_block()?;
        self.models.push(GlobalModelRecord {
            version,
            weights_digest: digest,
            weights: Some(bytes),
            t_id,
        });
        Ok((version, t_id))
    }

    /// Agent publishes the global model (version 0, or the next version).
    pub fn upload_global_model(
        &mut self,
        pool: &UserPool,
        chain: &mut ChainState,
        agent_token: &AuthToken,
        model: &Model,
        now_s: f64,
    ) -> Result<(u64, TxId), ChaincodeError> {
        let agent = authorize(pool, agent_token, Role::Agent, now_s, AGENT_TOKEN_EXPIRED)?;
        self.commit_model(chain, TxKind::ModelUpload, &agent, model, now_s)
    }

    /// Records one client's update for a round.
    pub fn record_client_update(
        &mut self,
        pool: &UserPool,
        chain: &mut ChainState,
        client_token: &AuthToken,
        submission: Submission,
        now_s: f64,
    ) -> Result<TxId, ChaincodeError> {
        let client = authorize(pool, client_token, Role::Client, now_s, CLIENT_IDENTITY_FALSE)?;
        if client != submission.client {
            return Err(ChaincodeError::AuthError(CLIENT_IDENTITY_FALSE));
        }
        if self.models.is_empty() {
            return Err(ChaincodeError::NoGlobalModel);
        }
        if submission.sample_count == 0 {
            return Err(ChaincodeError::InvalidSubmission("sample_count must be >= 1".into()));
        }
        if submission.update.is_empty() || submission.update.iter().any(|v| !v.is_finite()) {
            return Err(ChaincodeError::InvalidSubmission("update must be non-empty and finite".into()));
        }
        if self.submissions(submission.round).iter().any(|s| s.client == client) {
            return Err(ChaincodeError::DuplicateSubmission {
                client,
                round: submission.round,
            });
        }
        let digest = update_digest(&submission.update);
        let payload = sorted_json(&SubmissionPayload {
            client: client.clone(),
            round: submission.round,
            kind: submission.kind,
            sample_count: submission.sample_count,
            update_digest: digest,
            update: (self.config.payloads == PayloadMode::Full).then(|| B64.encode(f64s_to_bytes(&submission.update))),
        });
        let t_id = chain.submit_transaction(TxKind::ParameterSubmission, &client, payload, now_s)?;
        chain.seal_block()?;
        self.submissions.entry(submission.round).or_default().push(ParameterSubmission {
            client,
            round: submission.round,
            kind: submission.kind,
            update: submission.update,
            update_digest: digest,
            sample_count: submission.sample_count,
            t_id,
        });
        Ok(t_id)
    }

    /// All submissions of `round`, in submission order. Read-only.
    pub fn release_parameters_to_agent(
        &self,
        pool: &UserPool,
        agent_token: &AuthToken,
        round: u64,
        now_s: f64,
    ) -> Result<Vec<ParameterSubmission>, ChaincodeError> {
        authorize(pool, agent_token, Role::Agent, now_s, AGENT_IDENTITY_FALSE)?;
        Ok(self.submissions(round).to_vec())
    }

    /// Agent commits the newly aggregated model as the next version.
    pub fn commit_aggregated_model(
        &mut self,
        pool: &UserPool,
        chain: &mut ChainState,
        agent_token: &AuthToken,
        model: &Model,
        now_s: f64,
    ) -> Result<(u64, TxId), ChaincodeError> {
        let agent = authorize(pool, agent_token, Role::Agent, now_s, AGENT_IDENTITY_FALSE)?;
        if self.models.is_empty() {
            return Err(ChaincodeError::NoGlobalModel);
        }
        self.commit_model(chain, TxKind::AggregatedModel, &agent, model, now_s)
    }

    /// Re-verifies an unlearning report on `data` and, on a pass, seals the
    /// UnlearnResult and VerificationRecord transactions in one block.
    /// Returns the UnlearnResult transaction id.
    #[allow(clippy::too_many_arguments)]
    pub fn commit_unlearning_result(
        &mut self,
        pool: &UserPool,
        chain: &mut ChainState,
        client_token: &AuthToken,
        report: &UnlearnReport,
        criteria: &VerificationCriteria,
        data: ValidationSet<'_>,
        exec: Exec,
        now_s: f64,
    ) -> Result<TxId, ChaincodeError> {
        let client = authorize(pool, client_token, Role::Client, now_s, CLIENT_IDENTITY_FALSE)?;
        if client != report.requester {
            return Err(ChaincodeError::AuthError(CLIENT_IDENTITY_FALSE));
        }
        let global = self
            .model_record(report.base_version)
            .ok_or(ChaincodeError::UnknownVersion(report.base_version))?
            .model()?;
        let measured = match unlearner::verify(&global, report, criteria, data, exec) {
            Verdict::Pass(m) => m,
            Verdict::Fail { measured, reasons } => return Err(ChaincodeError::CriteriaNotMet { reasons, measured }),
        };
        let unlearned_digest = unlearner::unlearned_model(&global, report)
            .map_err(|e| ChaincodeError::MalformedRecord(e.to_string()))?
            .digest();
        let payload = sorted_json(&UnlearnPayload {
            report: report.clone(),
            unlearned_digest,
        });
        let t_id = chain.submit_transaction(TxKind::UnlearnResult, &client, payload, now_s)?;
        let vpayload = sorted_json(&VerificationPayload {
            unlearn_t_id: t_id,
            criteria: *criteria,
            measured,
            verdict: "pass".into(),
        });
        let verification_t_id = chain.submit_transaction(TxKind::VerificationRecord, &client, vpayload, now_s)?;
        chain.seal_block()?;
        self.unlearned.push(UnlearnRecord {
            report: report.clone(),
            unlearned_digest,
            criteria: *criteria,
            measured,
            t_id,
            verification_t_id,
        });
        Ok(t_id)
    }

    /// Rebuilds the contract state from sealed transactions only.
    pub fn replay(chain: &ChainState, config: ChaincodeConfig) -> Result<Chaincode, ChaincodeError> {
        let bad = |m: String| ChaincodeError::MalformedRecord(m);
        let mut cc = Chaincode::new(config);
        let mut pending_unlearn: Option<(UnlearnPayload, TxId)> = None;
        for tx in chain.transactions() {
            match tx.kind {
                TxKind::Register => {}
                TxKind::ModelUpload | TxKind::AggregatedModel => {
                    let p: ModelPayload = serde_json::from_slice(&tx.payload).map_err(|e| bad(e.to_string()))?;
                    if p.version != cc.models.len() as u64 {
                        return Err(bad(format!("model version {} out of sequence", p.version)));
                    }
                    let weights = match p.weights {
                        Some(s) => {
                            let bytes = B64.decode(s).map_err(|e| bad(e.to_string()))?;
                            if Hash32::of(&bytes) != p.weights_digest {
                                return Err(bad(format!("weights digest mismatch for version {}", p.version)));
                            }
                            Some(bytes)
                        }
                        None => None,
                    };
                    cc.models.push(GlobalModelRecord {
                        version: p.version,
                        weights_digest: p.weights_digest,
                        weights,
                        t_id: tx.t_id,
                    });
                }
                TxKind::ParameterSubmission => {
                    let p: SubmissionPayload = serde_json::from_slice(&tx.payload).map_err(|e| bad(e.to_string()))?;
                    let update = match p.update {
                        Some(s) => {
                            let bytes = B64.decode(s).map_err(|e| bad(e.to_string()))?;
                            let v = bytes_to_f64s(&bytes).ok_or_else(|| bad("ragged update bytes".into()))?;
                            if update_digest(&v) != p.update_digest {
                                return Err(bad("update digest mismatch".into()));
                            }
                            v
                        }
                        None => Vec::new(),
                    };
                    cc.submissions.entry(p.round).or_default().push(ParameterSubmission {
                        client: p.client,
                        round: p.round,
                        kind: p.kind,
                        update,
                        update_digest: p.update_digest,
                        sample_count: p.sample_count,
                        t_id: tx.t_id,
                    });
                }
                TxKind::UnlearnResult => {
                    if pending_unlearn.is_some() {
                        return Err(bad("UnlearnResult without VerificationRecord".into()));
                    }
                    let p: UnlearnPayload = serde_json::from_slice(&tx.payload).map_err(|e| bad(e.to_string()))?;
                    pending_unlearn = Some((p, tx.t_id));
                }
                TxKind::VerificationRecord => {
                    let v: VerificationPayload =
                        serde_json::from_slice(&tx.payload).map_err(|e| bad(e.to_string()))?;
                    let (p, t_id) = pending_unlearn
                        .take()
                        .filter(|(_, id)| *id == v.unlearn_t_id)
                        .ok_or_else(|| bad("VerificationRecord without matching UnlearnResult".into()))?;
                    cc.unlearned.push(UnlearnRecord {
                        report: p.report,
                        unlearned_digest: p.unlearned_digest,
                        criteria: v.criteria,
                        measured: v.measured,
                        t_id,
                        verification_t_id: tx.t_id,
                    });
                }
            }
        }
        if pending_unlearn.is_some() {
            return Err(bad("UnlearnResult without VerificationRecord".into()));
        }
        Ok(cc)
    }

    /// Digest of the digest-level state (no raw weights or update values),
    /// identical for live and replayed contracts in either payload mode.
    pub fn state_digest(&self) -> Hash32 {
        #[derive(Serialize)]
        struct M<'a> {
            version: u64,
            weights_digest: &'a Hash32,
            t_id: &'a TxId,
        }
        #[derive(Serialize)]
        struct S<'a> {
            client: &'a str,
            round: u64,
            kind: UpdateKind,
            sample_count: u64,
            update_digest: &'a Hash32,
            t_id: &'a TxId,
        }
        #[derive(Serialize)]
        struct U<'a> {
            report: &'a UnlearnReport,
            unlearned_digest: &'a Hash32,
            criteria: &'a VerificationCriteria,
            measured: &'a Measured,
            t_id: &'a TxId,
            verification_t_id: &'a TxId,
        }
        #[derive(Serialize)]
        struct State<'a> {
            models: Vec<M<'a>>,
            submissions: Vec<S<'a>>,
            unlearned: Vec<U<'a>>,
        }
        let state = State {
            models: self
                .models
                .iter()
                .map(|m| M {
                    version: m.version,
                    weights_digest: &m.weights_digest,
                    t_id: &m.t_id,
                })
                .collect(),
            submissions: self
                .submissions
                .values()
                .flatten()
                .map(|s| S {
                    client: &s.client,
                    round: s.round,
                    kind: s.kind,
                    sample_count: s.sample_count,
                    update_digest: &s.update_digest,
                    t_id: &s.t_id,
                })
                .collect(),
            unlearned: self
                .unlearned
                .iter()
                .map(|u| U {
                    report: &u.report,
                    unlearned_digest: &u.unlearned_digest,
                    criteria: &u.criteria,
                    measured: &u.measured,
                    t_id: &u.t_id,
                    verification_t_id: &u.verification_t_id,
                })
                .collect(),
        };
        Hash32::of(&sorted_json(&state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{generate_token, register_client, KeyPair, RegisterOutcome};
    use crate::tinylm::{Example, LoraConfig, ModelConfig};
    use crate::unlearner::{unlearn, ForgetRequest, UnlearnConfig};

    struct Fixture {
        pool: UserPool,
        chain: ChainState,
        cc: Chaincode,
        agent: AuthToken,
        client: AuthToken,
        client_keys: KeyPair,
        model: Model,
    }

    fn fixture(mode: PayloadMode) -> Fixture {
        let mut pool = UserPool::new(11);
        let mut chain = ChainState::new();
        let mut reg = |id: &str, role| match register_client(&mut pool, &mut chain, id, role, 0.0).unwrap() {
            RegisterOutcome::RegisterSuccess { token, keys } => (token, keys),
            RegisterOutcome::AlreadyExists => unreachable!(),
        };
        let (agent, _) = reg("agent", Role::Agent);
        let (client, client_keys) = reg("c1", Role::Client);
        let model = Model::init(ModelConfig {
            d_model: 4,
            d_ff: 4,
            max_len: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        Fixture {
            pool,
            chain,
            cc: Chaincode::new(ChaincodeConfig { payloads: mode }),
            agent,
            client,
            client_keys,
            model,
        }
    }

    fn sub(client: &str, round: u64) -> Submission {
        Submission {
            client: client.into(),
            round,
            kind: UpdateKind::Adapter,
            update: vec![0.5, -1.0, 2.0],
            sample_count: 3,
        }
    }

    #[test]
    fn upload_versions_and_auth() {
        let mut f = fixture(PayloadMode::Full);
        let (v0, t0) = f.cc.upload_global_model(&f.pool, &mut f.chain, &f.agent, &f.model, 1.0).unwrap();
        let (v1, _) = f.cc.upload_global_model(&f.pool, &mut f.chain, &f.agent, &f.model, 2.0).unwrap();
        assert_eq!((v0, v1), (0, 1));
        assert_eq!(f.chain.get_transaction(&t0).unwrap().kind, TxKind::ModelUpload);
        assert_eq!(f.cc.global_model().unwrap(), f.model);
        assert_eq!(
            f.cc.upload_global_model(&f.pool, &mut f.chain, &f.agent, &f.model, 1e6),
            Err(ChaincodeError::AuthError(AGENT_TOKEN_EXPIRED))
        );
        assert_eq!(
            f.cc.upload_global_model(&f.pool, &mut f.chain, &f.client, &f.model, 3.0),
            Err(ChaincodeError::AuthError(AGENT_TOKEN_EXPIRED))
        );
    }

    #[test]
    fn submissions_are_recorded_once() {
        let mut f = fixture(PayloadMode::Full);
        assert_eq!(
            f.cc.record_client_update(&f.pool, &mut f.chain, &f.client, sub("c1", 0), 1.0),
            Err(ChaincodeError::NoGlobalModel)
        );
        f.cc.upload_global_model(&f.pool, &mut f.chain, &f.agent, &f.model, 1.0).unwrap();
        let t = f.cc.record_client_update(&f.pool, &mut f.chain, &f.client, sub("c1", 0), 2.0).unwrap();
        assert_eq!(f.chain.get_transaction(&t).unwrap().kind, TxKind::ParameterSubmission);
        assert!(matches!(
            f.cc.record_client_update(&f.pool, &mut f.chain, &f.client, sub("c1", 0), 3.0),
            Err(ChaincodeError::DuplicateSubmission { round: 0, .. })
        ));
        assert_eq!(
            f.cc.record_client_update(&f.pool, &mut f.chain, &f.client, sub("c2", 0), 3.0),
            Err(ChaincodeError::AuthError(CLIENT_IDENTITY_FALSE))
        );
        assert_eq!(
            f.cc.record_client_update(&f.pool, &mut f.chain, &f.agent, sub("agent", 0), 3.0),
            Err(ChaincodeError::AuthError(CLIENT_IDENTITY_FALSE))
        );
        let got = f.cc.release_parameters_to_agent(&f.pool, &f.agent, 0, 3.0).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].update_digest, update_digest(&[0.5, -1.0, 2.0]));
        assert!(f.cc.release_parameters_to_agent(&f.pool, &f.agent, 5, 3.0).unwrap().is_empty());
        assert_eq!(
            f.cc.release_parameters_to_agent(&f.pool, &f.client, 0, 3.0),
            Err(ChaincodeError::AuthError(AGENT_IDENTITY_FALSE))
        );
    }

    #[test]
    fn forged_token_is_rejected() {
        let mut f = fixture(PayloadMode::Full);
        f.cc.upload_global_model(&f.pool, &mut f.chain, &f.agent, &f.model, 1.0).unwrap();
        let forged = generate_token(&crate::identity::key_generator(999), "c1", Role::Client, 0.0, 100.0).unwrap();
        assert_eq!(
            f.cc.record_client_update(&f.pool, &mut f.chain, &forged, sub("c1", 0), 2.0),
            Err(ChaincodeError::AuthError(CLIENT_IDENTITY_FALSE))
        );
        let agent_claim = generate_token(&f.client_keys, "c1", Role::Agent, 0.0, 100.0).unwrap();
        assert_eq!(
            f.cc.commit_aggregated_model(&f.pool, &mut f.chain, &agent_claim, &f.model, 2.0),
            Err(ChaincodeError::AuthError(AGENT_IDENTITY_FALSE))
        );
    }

    fn unlearn_fixture(f: &mut Fixture) -> (UnlearnReport, Vec<Example>) {
        f.cc.upload_global_model(&f.pool, &mut f.chain, &f.agent, &f.model, 1.0).unwrap();
        let data: Vec<Example> = ["ab", "cd", "ef"].iter().map(|t| Example::from_text(t, 1, 8)).collect();
        let req = ForgetRequest {
            requester: "c1".into(),
            forget: data.clone(),
            config: UnlearnConfig {
                epochs: 2,
                lora: LoraConfig::new(2, 2.0, 0.0),
                ..UnlearnConfig::default()
            },
            base_version: 0,
            seed: 0,
        };
        (unlearn(&f.model, 0, &req, &data, Exec::Sequential).unwrap(), data)
    }

    #[test]
    fn unlearning_commit_pass_and_fail() {
        let mut f = fixture(PayloadMode::Full);
        let (report, data) = unlearn_fixture(&mut f);
        let set = ValidationSet {
            forget: &data,
            retain: &data,
        };
        let strict = VerificationCriteria {
            tau_forget: -0.0,
            delta_retain: Some(0.0),
        };
        let len = f.chain.len();
        let forget_acc = unlearner::unlearned_model(&f.model, &report).unwrap().accuracy(&data, Exec::Sequential).unwrap();
        if forget_acc > 0.0 {
            assert!(matches!(
                f.cc.commit_unlearning_result(&f.pool, &mut f.chain, &f.client, &report, &strict, set, Exec::Sequential, 5.0),
                Err(ChaincodeError::CriteriaNotMet { .. })
            ));
            assert_eq!(f.chain.len(), len);
        }
        let lenient = VerificationCriteria {
            tau_forget: 1.0,
            delta_retain: None,
        };
        assert_eq!(
            f.cc.commit_unlearning_result(&f.pool, &mut f.chain, &f.agent, &report, &lenient, set, Exec::Sequential, 5.0),
            Err(ChaincodeError::AuthError(CLIENT_IDENTITY_FALSE))
        );
        let t = f
            .cc
            .commit_unlearning_result(&f.pool, &mut f.chain, &f.client, &report, &lenient, set, Exec::Sequential, 5.0)
            .unwrap();
        assert_eq!(f.chain.get_transaction(&t).unwrap().kind, TxKind::UnlearnResult);
        assert_eq!(f.chain.count_kind(TxKind::VerificationRecord), 1);
        assert_eq!(f.chain.blocks().last().unwrap().transactions.len(), 2);
    }

    #[test]
    fn replay_reconstructs_state() {
        for mode in [PayloadMode::Full, PayloadMode::DigestOnly] {
            let mut f = fixture(mode);
            let (report, data) = unlearn_fixture(&mut f);
            f.cc.record_client_update(&f.pool, &mut f.chain, &f.client, sub("c1", 0), 2.0).unwrap();
            f.cc.commit_aggregated_model(&f.pool, &mut f.chain, &f.agent, &f.model, 3.0).unwrap();
            let set = ValidationSet {
                forget: &data,
                retain: &data,
            };
            let lenient = VerificationCriteria {
                tau_forget: 1.0,
                delta_retain: None,
            };
            f.cc.commit_unlearning_result(&f.pool, &mut f.chain, &f.client, &report, &lenient, set, Exec::Sequential, 4.0)
                .unwrap();
            let back = Chaincode::replay(&f.chain, f.cc.config()).unwrap();
            assert_eq!(back.state_digest(), f.cc.state_digest());
            assert_eq!(back.latest().unwrap().weights_digest, f.model.digest());
            if mode == PayloadMode::Full {
                assert_eq!(back, f.cc);
            } else {
                assert!(back.latest().unwrap().weights.is_none());
            }
        }
    }
}
