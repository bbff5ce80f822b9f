//! Forgetting through a fresh LoRA adapter trained by gradient ascent,
//! metric evaluation, verification and the retrain-from-scratch baseline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clock::LatencyProfile;
use crate::fedcore::{self, ClientState, FedError, Network, RoundConfig};
use crate::par::{self, Exec};
use crate::seed;
use crate::tinylm::{
    DropoutMode, Direction, Example, LoraAdapter, LoraConfig, Model, ModelConfig, ModelError, Trainable,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UnlearnError {
    #[error("forget set is empty")]
    EmptyForgetSet,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("request targets model version {requested}, current is {current}")]
    VersionMismatch { requested: u64, current: u64 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fed(#[from] Box<FedError>),
}

impl From<FedError> for UnlearnError {
    fn from(e: FedError) -> Self {
        UnlearnError::Fed(Box::new(e))
    }
}

/// Hyperparameters of one unlearning run, without the data. Missing fields
/// take their defaults when deserialized.
///
/// Each step ascends the cross-entropy of the examples in the batch whose
/// loss is still below `loss_cap`; once every example is past the cap the
/// step is skipped. With `normalize`, the gradient is rescaled to unit norm,
/// so the step length is `eta` however saturated the model is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    pub epochs: usize,
    pub eta: f64,
    pub lora: LoraConfig,
    pub batch_size: usize,
    pub clip: Option<f64>,
    pub loss_cap: Option<f64>,
    pub normalize: bool,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            epochs: 20,
            eta: 1.0,
            lora: LoraConfig::new(8, 4.0, 0.3),
            batch_size: 20,
            clip: Some(crate::tinylm::DEFAULT_CLIP),
            loss_cap: Some(2.0),
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgetRequest {
    pub requester: String,
    pub forget: Vec<Example>,
    pub config: UnlearnConfig,
    pub base_version: u64,
    pub seed: u64,
}

impl ForgetRequest {
    pub fn validate(&self, d_model: usize) -> Result<(), UnlearnError> {
        let c = &self.config;
        c.lora.validate(d_model)?;
        if c.epochs > 0 && self.forget.is_empty() {
            return Err(UnlearnError::EmptyForgetSet);
        }
        if c.batch_size == 0 {
            return Err(UnlearnError::InvalidRequest("batch_size must be >= 1".into()));
        }
        if !(c.eta.is_finite() && c.eta >= 0.0) {
            return Err(UnlearnError::InvalidRequest(format!("eta {}", c.eta)));
        }
        if matches!(c.clip, Some(v) if !(v > 0.0)) {
            return Err(UnlearnError::InvalidRequest("clip must be positive".into()));
        }
        if matches!(c.loss_cap, Some(v) if !(v > 0.0)) {
            return Err(UnlearnError::InvalidRequest("loss_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of [`unlearn`]. `delta` is the change of the adapter parameters
/// from their seeded initial value, in adapter flat order, so the unlearned
/// model is reproducible from `(global, lora, adapter_seed, delta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub requester: String,
    pub base_version: u64,
    pub lora: LoraConfig,
    pub adapter_seed: u64,
    pub delta: Vec<f64>,
    pub acc_forget_before: f64,
    pub acc_forget_after: f64,
    pub acc_retain_before: f64,
    pub acc_retain_after: f64,
    /// Mean retain-set loss after unlearning.
    pub loss_val: f64,
    /// Eval-mode forget-set loss before the first and after every epoch.
    pub forget_loss_trace: Vec<f64>,
    /// Forget-set accuracy at the same points as `forget_loss_trace`.
    pub forget_acc_trace: Vec<f64>,
    pub epochs_run: usize,
    pub grad_steps: u64,
}

/// Applies a report to its global model: base merged, report adapter on top.
pub fn unlearned_model(global: &Model, report: &UnlearnReport) -> Result<Model, UnlearnError> {
    let base = global.merged_weights()?;
    let mut adapter = LoraAdapter::init(report.lora.clone(), base.config.d_model, report.adapter_seed)?;
    let mut flat = adapter.to_flat();
    if flat.len() != report.delta.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "delta of {} for adapter of {}",
            report.delta.len(),
            flat.len()
        ))
        .into());
    }
    flat.iter_mut().zip(&report.delta).for_each(|(p, d)| *p += d);
    adapter.set_flat(&flat)?;
    Ok(Model::new(base, Some(adapter))?)
}

/// `(accuracy, mean cross-entropy)` in eval mode.
pub fn evaluate(model: &Model, data: &[Example], exec: Exec) -> Result<(f64, f64), UnlearnError> {
    if data.is_empty() {
        return Err(UnlearnError::EmptyDataset);
    }
    Ok((model.accuracy(data, exec)?, model.mean_loss(data, exec)?))
}

/// Gradient-ascent forgetting of `request.forget` through a fresh adapter
/// on top of the (merged) global model. The base weights are not touched.
///
/// `retain` is only used for the before/after metrics.
pub fn unlearn(
    global: &Model,
    current_version: u64,
    request: &ForgetRequest,
    retain: &[Example],
    exec: Exec,
) -> Result<UnlearnReport, UnlearnError> {
    if request.base_version != current_version {
        return Err(UnlearnError::VersionMismatch {
            requested: request.base_version,
            current: current_version,
        });
    }
    let base = global.merged_weights()?;
    request.validate(base.config.d_model)?;
    if retain.is_empty() {
        return Err(UnlearnError::EmptyDataset);
    }
    let cfg = &request.config;
    let adapter_seed = seed::derive("unlearner/adapter", &[request.seed, request.base_version]);
    let adapter = LoraAdapter::init(cfg.lora.clone(), base.config.d_model, adapter_seed)?;
    let init_flat = adapter.to_flat();
    let mut local = Model::new(base, Some(adapter))?;

    let forget_metrics = |m: &Model| -> Result<(f64, f64), UnlearnError> {
        if request.forget.is_empty() {
            Ok((0.0, 0.0))
        } else {
            evaluate(m, &request.forget, exec)
        }
    };
    let (acc_forget_before, loss_forget_before) = forget_metrics(global)?;
    let (acc_retain_before, _) = evaluate(global, retain, exec)?;

    let mut trace = vec![loss_forget_before];
    let mut acc_trace = vec![acc_forget_before];
    let mut steps = 0u64;
    let mut order: Vec<usize> = (0..request.forget.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng("unlearner/shuffle", &[request.seed, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch: Vec<Example> = chunk.iter().map(|&i| request.forget[i].clone()).collect();
            if let Some(cap) = cfg.loss_cap {
                let keep = par::map(exec, &batch, |_, ex| {
                    local.probs(&ex.tokens).map(|p| -p[ex.label].max(f64::MIN_POSITIVE).ln() < cap)
                })
                .into_iter()
                .collect::<Result<Vec<bool>, ModelError>>()?;
                let mut k = keep.iter();
                batch.retain(|_| *k.next().expect("same length"));
                if batch.is_empty() {
                    continue;
                }
            }
            let mode = DropoutMode::Train {
                seed: adapter_seed,
                step: steps,
            };
            let (_, mut grads) = local.loss_and_grad(&batch, Trainable::AdaptersOnly, mode, exec)?;
            if cfg.normalize {
                let n = grads.norm();
                if n > 0.0 {
                    for g in grads.adapter.iter_mut().flatten() {
                        *g /= n;
                    }
                }
            }
            local.step(&grads, cfg.eta, Direction::Ascent, cfg.clip)?;
            steps += 1;
        }
        let (acc, loss) = forget_metrics(&local)?;
        acc_trace.push(acc);
        trace.push(loss);
    }

    let delta: Vec<f64> = local
        .adapter
        .as_ref()
        .map(|a| a.to_flat())
        .unwrap_or_default()
        .iter()
        .zip(&init_flat)
        .map(|(a, b)| a - b)
        .collect();
    let (acc_forget_after, _) = forget_metrics(&local)?;
    let (acc_retain_after, loss_val) = evaluate(&local, retain, exec)?;
    Ok(UnlearnReport {
        requester: request.requester.clone(),
        base_version: request.base_version,
        lora: cfg.lora.clone(),
        adapter_seed,
        delta,
        acc_forget_before,
        acc_forget_after,
        acc_retain_before,
        acc_retain_after,
        loss_val,
        forget_loss_trace: trace,
        forget_acc_trace: acc_trace,
        epochs_run: cfg.epochs,
        grad_steps: steps,
    })
}

/// Pass/fail thresholds standing in for the feasible post-unlearning set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationCriteria {
    pub tau_forget: f64,
    /// Maximum allowed retain-accuracy drop; `None` disables the check.
    #[serde(default)]
    pub delta_retain: Option<f64>,
}

impl Default for VerificationCriteria {
    fn default() -> Self {
        VerificationCriteria {
            tau_forget: 0.10,
            delta_retain: None,
        }
    }
}

impl VerificationCriteria {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.tau_forget) && self.delta_retain.map_or(true, |d| d >= 0.0)
    }
}

/// Data the verifier recomputes metrics on.
#[derive(Debug, Clone, Copy)]
pub struct ValidationSet<'a> {
    pub forget: &'a [Example],
    pub retain: &'a [Example],
}

/// Metrics recomputed by [`verify`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub acc_forget: f64,
    pub acc_retain_before: f64,
    pub acc_retain_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Pass(Measured),
    Fail { measured: Option<Measured>, reasons: Vec<String> },
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass(_))
    }
}

/// Judges a report by recomputing its metrics on `data`; the numbers in the
/// report are never read.
pub fn verify(
    global: &Model,
    report: &UnlearnReport,
    criteria: &VerificationCriteria,
    data: ValidationSet<'_>,
    exec: Exec,
) -> Verdict {
    let fail = |reason: String| Verdict::Fail {
        measured: None,
        reasons: vec![reason],
    };
    if !criteria.is_valid() {
        return fail("invalid verification criteria".into());
    }
    if data.forget.is_empty() {
        return fail("empty forget validation set".into());
    }
    let model = match unlearned_model(global, report) {
        Ok(m) => m,
        Err(e) => return fail(format!("cannot rebuild unlearned model: {e}")),
    };
    let measure = || -> Result<Measured, ModelError> {
        let acc_forget = model.accuracy(data.forget, exec)?;
        let (before, after) = if data.retain.is_empty() {
            (0.0, 0.0)
        } else {
            (global.accuracy(data.retain, exec)?, model.accuracy(data.retain, exec)?)
        };
        Ok(Measured {
            acc_forget,
            acc_retain_before: before,
            acc_retain_after: after,
        })
    };
    let m = match measure() {
        Ok(m) => m,
        Err(e) => return fail(format!("evaluation failed: {e}")),
    };
    let mut reasons = Vec::new();
    if m.acc_forget > criteria.tau_forget {
        reasons.push("forget accuracy above threshold".to_owned());
    }
    if let Some(max_drop) = criteria.delta_retain {
        if data.retain.is_empty() {
            reasons.push("retain check enabled without retain data".to_owned());
        } else if m.acc_retain_before - m.acc_retain_after > max_drop {
            reasons.push("retain accuracy drop above threshold".to_owned());
        }
    }
    if reasons.is_empty() {
        Verdict::Pass(m)
    } else {
        Verdict::Fail {
            measured: Some(m),
            reasons,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub model: Model,
    pub acc_forget: f64,
    pub acc_retain: f64,
    pub grad_steps: u64,
    pub rounds: usize,
}

/// Trains a fresh model through the federated loop on retain clients only.
///
/// `retain` is the list of `(client id, private data)`; `validate` supplies
/// the data the final model is scored on.
#[allow(clippy::too_many_arguments)]
pub fn retrain_baseline(
    retain: Vec<(String, Vec<Example>)>,
    model_config: ModelConfig,
    train_lora: Option<LoraConfig>,
    round_cfg: &RoundConfig,
    rounds: usize,
    seed: u64,
    validate: ValidationSet<'_>,
    exec: Exec,
) -> Result<BaselineResult, UnlearnError> {
    if retain.is_empty() || retain.iter().all(|(_, d)| d.is_empty()) || validate.retain.is_empty() {
        return Err(UnlearnError::EmptyDataset);
    }
    let fresh = ModelConfig {
        seed: seed::derive("unlearner/baseline", &[seed, model_config.seed]),
        ..model_config
    };
    let model = fedcore::initial_model(fresh, train_lora.as_ref())?;
    let mut net = Network::new(seed, LatencyProfile::ZERO, Default::default());
    let agent = net.register_agent("agent")?;
    let mut clients: Vec<ClientState> = Vec::with_capacity(retain.len());
    for (id, data) in retain {
        clients.push(net.register_client(&id, data)?);
    }
    net.upload(&agent, &model)?;
    let mut steps = 0u64;
    for round in 0..rounds {
        let report = fedcore::run_round(&mut net, &agent, &mut clients, round as u64, round_cfg, validate.retain, exec)?;
        steps += report.grad_steps;
    }
    let model = net.global_model()?;
    let acc_forget = if validate.forget.is_empty() {
        0.0
    } else {
        model.accuracy(validate.forget, exec)?
    };
    let acc_retain = model.accuracy(validate.retain, exec)?;
    Ok(BaselineResult {
        model,
        acc_forget,
        acc_retain,
        grad_steps: steps,
        rounds,
    })
}
