//! Forward pass, hand-written backward pass and batch gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ledger::canonical::{Decoder, Encoder, Hash32};
use crate::par::{self, Exec};
use crate::seed;

use super::matrix::{add_row_bias, col_sum_acc, dot, log_sum_exp, mm, mm_a_bt, mm_at_b_acc, softmax_in_place};
use super::optim::{apply_update, global_norm, Direction};
use super::{LoraAdapter, LoraPair, ModelConfig, ModelError, Weights};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

impl Example {
    pub fn from_text(text: &str, label: usize, max_len: usize) -> Example {
        Example {
            tokens: super::tokenize(text, max_len),
            label,
        }
    }
}

/// Whether adapter input dropout is active. Masks are drawn per
/// `(seed, step, sample index, target)`, so they do not depend on scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Eval,
    Train { seed: u64, step: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    AdaptersOnly,
    AllWeights,
}

/// Flat gradients, in [`Weights::to_flat`] / [`LoraAdapter::to_flat`] order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub weights: Option<Vec<f64>>,
    pub adapter: Option<Vec<f64>>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        let parts: Vec<&[f64]> = self.weights.iter().chain(self.adapter.iter()).map(|v| v.as_slice()).collect();
        global_norm(&parts)
    }

    fn add_assign(&mut self, other: &Gradients) {
        fn acc(into: &mut Option<Vec<f64>>, from: &Option<Vec<f64>>) {
            match (into.as_mut(), from) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *into = Some(b.clone()),
                _ => {}
            }
        }
        acc(&mut self.weights, &other.weights);
        acc(&mut self.adapter, &other.adapter);
    }
}

/// Base weights plus an optional unmerged adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub weights: Weights,
    pub adapter: Option<LoraAdapter>,
}

impl Model {
    pub fn new(weights: Weights, adapter: Option<LoraAdapter>) -> Result<Model, ModelError> {
        weights.validate()?;
        if let Some(ad) = &adapter {
            check_adapter(&weights.config, ad)?;
        }
        Ok(Model { weights, adapter })
    }

    pub fn init(config: ModelConfig) -> Result<Model, ModelError> {
        Model::new(Weights::init(config)?, None)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    /// Weights with the adapter folded in.
    pub fn merged_weights(&self) -> Result<Weights, ModelError> {
        match &self.adapter {
            Some(ad) => ad.merge_into(&self.weights),
            None => Ok(self.weights.clone()),
        }
    }

    /// Folds the adapter into the base weights and drops it.
    pub fn merge(&mut self) -> Result<(), ModelError> {
        self.weights = self.merged_weights()?;
        self.adapter = None;
        Ok(())
    }

    pub fn probs(&self, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        forward(&self.weights, self.adapter.as_ref(), tokens, DropoutMode::Eval)
    }

    /// Arg-max class; ties go to the lower index.
    pub fn predict(&self, tokens: &[u32]) -> Result<usize, ModelError> {
        Ok(argmax(&self.probs(tokens)?))
    }

    /// Fraction of correctly classified examples; 0 for an empty set.
    pub fn accuracy(&self, data: &[Example], exec: Exec) -> Result<f64, ModelError> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let hits = par::map(exec, data, |_, ex| {
            check_example(self.config(), ex)?;
            Ok(self.predict(&ex.tokens)? == ex.label)
        })
        .into_iter()
        .collect::<Result<Vec<bool>, ModelError>>()?;
        Ok(hits.iter().filter(|h| **h).count() as f64 / data.len() as f64)
    }

    /// Mean cross-entropy in eval mode.
    pub fn mean_loss(&self, data: &[Example], exec: Exec) -> Result<f64, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let losses = par::map(exec, data, |_, ex| {
            check_example(self.config(), ex)?;
            let c = run(&self.weights, self.adapter.as_ref(), &ex.tokens, DropoutMode::Eval, 0);
            Ok(c.loss(ex.label))
        })
        .into_iter()
        .collect::<Result<Vec<f64>, ModelError>>()?;
        Ok(losses.iter().sum::<f64>() / data.len() as f64)
    }

    pub fn loss_and_grad(
        &self,
        batch: &[Example],
        trainable: Trainable,
        mode: DropoutMode,
        exec: Exec,
    ) -> Result<(f64, Gradients), ModelError> {
        loss_and_grad(&self.weights, self.adapter.as_ref(), batch, trainable, mode, exec)
    }

    /// One optimizer step; `clip` bounds the joint norm of both parts.
    pub fn step(&mut self, grads: &Gradients, eta: f64, dir: Direction, clip: Option<f64>) -> Result<(), ModelError> {
        let factor = match clip {
            Some(c) => {
                let n = grads.norm();
                if n > c && n > 0.0 {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        if let Some(g) = &grads.weights {
            let mut flat = self.weights.to_flat();
            apply_update(&mut flat, g, eta * factor, dir, None)?;
            self.weights.set_flat(&flat)?;
        }
        if let Some(g) = &grads.adapter {
            let ad = self.adapter.as_mut().ok_or(ModelError::NoAdapter)?;
            let mut flat = ad.to_flat();
            apply_update(&mut flat, g, eta * factor, dir, None)?;
            ad.set_flat(&flat)?;
        }
        Ok(())
    }

    /// Weights bytes, then a `u64` adapter flag and the adapter bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.weights.encode_into(&mut e);
        match &self.adapter {
            Some(ad) => {
                e.u64(1);
                ad.encode_into(&mut e);
            }
            None => {
                e.u64(0);
            }
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model, ModelError> {
        let err = |e: crate::ledger::canonical::DecodeError| ModelError::Decode(e.to_string());
        let mut d = Decoder::new(bytes);
        let weights = Weights::decode_from(&mut d)?;
        let adapter = match d.u64().map_err(err)? {
            0 => None,
            1 => Some(LoraAdapter::decode_from(&mut d)?),
            f => return Err(ModelError::Decode(format!("adapter flag {f}"))),
        };
        d.finish().map_err(err)?;
        Model::new(weights, adapter)
    }

    pub fn digest(&self) -> Hash32 {
        Hash32::of(&self.to_bytes())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn check_adapter(c: &ModelConfig, ad: &LoraAdapter) -> Result<(), ModelError> {
    if ad.d_model != c.d_model {
        return Err(ModelError::ShapeMismatch(format!(
            "adapter d_model {} vs model {}",
            ad.d_model, c.d_model
        )));
    }
    ad.validate()
}

fn check_tokens(c: &ModelConfig, tokens: &[u32]) -> Result<(), ModelError> {
    if tokens.len() > c.max_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max_len: c.max_len,
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t as usize >= c.vocab) {
        return Err(ModelError::TokenOutOfRange { token, vocab: c.vocab });
    }
    Ok(())
}

fn check_example(c: &ModelConfig, ex: &Example) -> Result<(), ModelError> {
    check_tokens(c, &ex.tokens)?;
    if ex.label >= c.n_classes {
        return Err(ModelError::LabelOutOfRange {
            label: ex.label,
            n_classes: c.n_classes,
        });
    }
    Ok(())
}

/// Class probabilities for one sequence. An empty sequence gets a uniform
/// distribution.
pub fn forward(
    weights: &Weights,
    adapter: Option<&LoraAdapter>,
    tokens: &[u32],
    mode: DropoutMode,
) -> Result<Vec<f64>, ModelError> {
    check_tokens(&weights.config, tokens)?;
    if let Some(ad) = adapter {
        check_adapter(&weights.config, ad)?;
    }
    Ok(run(weights, adapter, tokens, mode, 0).probs)
}

/// Mean loss over `batch` and its gradient, averaged per example.
///
/// Per-example gradients are computed through [`par::map`] and summed in
/// batch order.
pub fn loss_and_grad(
    weights: &Weights,
    adapter: Option<&LoraAdapter>,
    batch: &[Example],
    trainable: Trainable,
    mode: DropoutMode,
    exec: Exec,
) -> Result<(f64, Gradients), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if trainable == Trainable::AdaptersOnly && adapter.is_none() {
        return Err(ModelError::NoAdapter);
    }
    if let Some(ad) = adapter {
        check_adapter(&weights.config, ad)?;
    }
    for ex in batch {
        check_example(&weights.config, ex)?;
    }
    let inv = 1.0 / batch.len() as f64;
    let per = par::map(exec, batch, |i, ex| {
        let cache = run(weights, adapter, &ex.tokens, mode, i as u64);
        let loss = cache.loss(ex.label);
        (loss, backward(weights, adapter, &ex.tokens, &cache, ex.label, inv, trainable))
    });
    let mut loss = 0.0;
    let mut grads = Gradients::default();
    for (l, g) in &per {
        loss += l;
        grads.add_assign(g);
    }
    Ok((loss * inv, grads))
}

struct AdapterCache {
    /// Adapter input after dropout.
    xt: Vec<f64>,
    /// Per-element dropout multiplier (`0` or `1/(1-p)`), `None` when inactive.
    mask: Option<Vec<f64>>,
    /// `xt * A`.
    t: Vec<f64>,
}

struct Cache {
    len: usize,
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    z: Vec<f64>,
    h1: Vec<f64>,
    u: Vec<f64>,
    r: Vec<f64>,
    g: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    q_ad: Option<AdapterCache>,
    v_ad: Option<AdapterCache>,
}

impl Cache {
    fn loss(&self, label: usize) -> f64 {
        log_sum_exp(&self.logits) - self.logits[label]
    }
}

/// `x * W + b (+ s * dropout(x) * A * B)`.
fn project(
    x: &[f64],
    len: usize,
    d: usize,
    w: &super::Matrix,
    b: &[f64],
    pair: Option<&LoraPair>,
    scale: f64,
    dropout: f64,
    mask_seed: Option<[u64; 4]>,
) -> (Vec<f64>, Option<AdapterCache>) {
    let mut out = mm(x, len, d, w.data(), d);
    add_row_bias(&mut out, b);
    let Some(pair) = pair else {
        return (out, None);
    };
    let r = pair.a.cols();
    let mask = match mask_seed {
        Some(parts) if dropout > 0.0 => {
            let mut rng = seed::rng("tinylm/dropout", &parts);
            let keep = 1.0 / (1.0 - dropout);
            Some((0..x.len()).map(|_| if rng.gen::<f64>() < dropout { 0.0 } else { keep }).collect::<Vec<f64>>())
        }
        _ => None,
    };
    let xt: Vec<f64> = match &mask {
        Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => x.to_vec(),
    };
    let t = mm(&xt, len, d, pair.a.data(), r);
    let tb = mm(&t, len, r, pair.b.data(), d);
    for (o, v) in out.iter_mut().zip(&tb) {
        *o += scale * v;
    }
    (out, Some(AdapterCache { xt, mask, t }))
}

const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

fn run(w: &Weights, adapter: Option<&LoraAdapter>, tokens: &[u32], mode: DropoutMode, sample: u64) -> Cache {
    let c = &w.config;
    let (d, f, n) = (c.d_model, c.d_ff, c.n_classes);
    let len = tokens.len();
    let mut x = Vec::with_capacity(len * d);
    for &t in tokens {
        x.extend_from_slice(w.embedding.row(t as usize));
    }
    let (scale, dropout) = adapter.map_or((0.0, 0.0), |a| (a.scale(), a.config.dropout));
    let mask_seed = |target: u64| match mode {
        DropoutMode::Eval => None,
        DropoutMode::Train { seed, step } => Some([seed, step, sample, target]),
    };
    let (q, q_ad) = project(
        &x,
        len,
        d,
        &w.w_q,
        &w.b_q,
        adapter.and_then(|a| a.query.as_ref()),
        scale,
        dropout,
        mask_seed(0),
    );
    let (k, _) = project(&x, len, d, &w.w_k, &w.b_k, None, 0.0, 0.0, None);
    let (v, v_ad) = project(
        &x,
        len,
        d,
        &w.w_v,
        &w.b_v,
        adapter.and_then(|a| a.value.as_ref()),
        scale,
        dropout,
        mask_seed(1),
    );

    let inv_sqrt = 1.0 / (d as f64).sqrt();
    let mut p = mm_a_bt(&q, len, d, &k, len);
    for row in p.chunks_mut(len.max(1)) {
        row.iter_mut().for_each(|s| *s *= inv_sqrt);
        softmax_in_place(row);
    }
    let z = mm(&p, len, len, &v, d);
    let mut h1 = mm(&z, len, d, w.w_o.data(), d);
    add_row_bias(&mut h1, &w.b_o);
    h1.iter_mut().zip(&x).for_each(|(h, xv)| *h += xv);

    let mut u = mm(&h1, len, d, w.w_1.data(), f);
    add_row_bias(&mut u, &w.b_1);
    let r: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
    let mut h2 = mm(&r, len, f, w.w_2.data(), d);
    add_row_bias(&mut h2, &w.b_2);
    h2.iter_mut().zip(&h1).for_each(|(h, a)| *h += a);

    let mut g = vec![0.0; d];
    let (logits, probs) = if len == 0 {
        (vec![0.0; n], vec![1.0 / n as f64; n])
    } else {
        col_sum_acc(&mut g, &h2);
        g.iter_mut().for_each(|v| *v /= len as f64);
        let mut logits = mm(&g, 1, d, w.head.data(), n);
        add_row_bias(&mut logits, &w.b_head);
        let mut probs = logits.clone();
        softmax_in_place(&mut probs);
        (logits, probs)
    };
    Cache {
        len,
        x,
        q,
        k,
        v,
        p,
        z,
        h1,
        u,
        r,
        g,
        logits,
        probs,
        q_ad,
        v_ad,
    }
}

/// Backward through one adapted projection. Accumulates into `gw_w`/`gw_b`
/// (base) and the adapter pair; returns nothing, adds into `dx` if given.
#[allow(clippy::too_many_arguments)]
fn project_backward(
    x: &[f64],
    len: usize,
    d: usize,
    dy: &[f64],
    w: &super::Matrix,
    base: Option<(&mut [f64], &mut [f64])>,
    adapter: Option<(&LoraPair, &AdapterCache, f64, &mut LoraPair)>,
    dx: Option<&mut [f64]>,
) {
    let want_dx = dx.is_some();
    let mut dx_local = dx;
    if let Some((gw, gb)) = base {
        mm_at_b_acc(gw, x, len, d, dy, d);
        col_sum_acc(gb, dy);
    }
    if let Some(dx) = dx_local.as_deref_mut() {
        let t = mm_a_bt(dy, len, d, w.data(), d);
        dx.iter_mut().zip(&t).for_each(|(a, b)| *a += b);
    }
    if let Some((pair, cache, s, gpair)) = adapter {
        let r = pair.a.cols();
        // dB = s * T^T dY
        let sdy: Vec<f64> = dy.iter().map(|v| v * s).collect();
        mm_at_b_acc(gpair.b.data_mut(), &cache.t, len, r, &sdy, d);
        // dT = s * dY B^T, dA = Xt^T dT
        let dt = mm_a_bt(&sdy, len, d, pair.b.data(), r);
        mm_at_b_acc(gpair.a.data_mut(), &cache.xt, len, d, &dt, r);
        if want_dx {
            let mut dxt = mm_a_bt(&dt, len, r, pair.a.data(), d);
            if let Some(m) = &cache.mask {
                dxt.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            if let Some(dx) = dx_local.as_deref_mut() {
                dx.iter_mut().zip(&dxt).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn backward(
    w: &Weights,
    adapter: Option<&LoraAdapter>,
    tokens: &[u32],
    c: &Cache,
    label: usize,
    weight: f64,
    trainable: Trainable,
) -> Gradients {
    let cfg = &w.config;
    let (d, f, n, len) = (cfg.d_model, cfg.d_ff, cfg.n_classes, c.len);
    let full = trainable == Trainable::AllWeights;
    let mut gw = full.then(|| Weights::zeros(*cfg));
    let mut ga = adapter.map(|a| a.zeros_like());
    let finish = |gw: Option<Weights>, ga: Option<LoraAdapter>| Gradients {
        weights: gw.map(|g| g.to_flat()),
        adapter: ga.map(|g| g.to_flat()),
    };
    if len == 0 {
        return finish(gw, ga);
    }

    let mut dlog = c.probs.clone();
    dlog[label] -= 1.0;
    dlog.iter_mut().for_each(|v| *v *= weight);
    if let Some(g) = gw.as_mut() {
        mm_at_b_acc(g.head.data_mut(), &c.g, 1, d, &dlog, n);
        col_sum_acc(&mut g.b_head, &dlog);
    }
    let dg = mm_a_bt(&dlog, 1, n, w.head.data(), d);
    let inv_len = 1.0 / len as f64;
    let dh2: Vec<f64> = (0..len).flat_map(|_| dg.iter().map(|v| v * inv_len)).collect();

    // FFN
    if let Some(g) = gw.as_mut() {
        mm_at_b_acc(g.w_2.data_mut(), &c.r, len, f, &dh2, d);
        col_sum_acc(&mut g.b_2, &dh2);
    }
    let mut du = mm_a_bt(&dh2, len, d, w.w_2.data(), f);
    du.iter_mut().zip(&c.u).for_each(|(g, &u)| *g *= gelu_grad(u));
    if let Some(g) = gw.as_mut() {
        mm_at_b_acc(g.w_1.data_mut(), &c.h1, len, d, &du, f);
        col_sum_acc(&mut g.b_1, &du);
    }
    let mut dh1 = mm_a_bt(&du, len, f, w.w_1.data(), d);
    dh1.iter_mut().zip(&dh2).for_each(|(a, b)| *a += b);

    // Attention output
    if let Some(g) = gw.as_mut() {
        mm_at_b_acc(g.w_o.data_mut(), &c.z, len, d, &dh1, d);
        col_sum_acc(&mut g.b_o, &dh1);
    }
    let dz = mm_a_bt(&dh1, len, d, w.w_o.data(), d);
    let dp = mm_a_bt(&dz, len, d, &c.v, len);
    let mut dv = vec![0.0; len * d];
    mm_at_b_acc(&mut dv, &c.p, len, len, &dz, d);
    let inv_sqrt = 1.0 / (d as f64).sqrt();
    let mut ds = vec![0.0; len * len];
    for i in 0..len {
        let (prow, dprow) = (&c.p[i * len..(i + 1) * len], &dp[i * len..(i + 1) * len]);
        let rd = dot(prow, dprow);
        for j in 0..len {
            ds[i * len + j] = prow[j] * (dprow[j] - rd) * inv_sqrt;
        }
    }
    let dq = mm(&ds, len, len, &c.k, d);
    let mut dk = vec![0.0; len * d];
    mm_at_b_acc(&mut dk, &ds, len, len, &c.q, d);

    let mut dx = full.then(|| dh1.clone());
    let scale = adapter.map_or(0.0, |a| a.scale());
    {
        let (gq, gv) = match ga.as_mut() {
            Some(a) => (a.query.as_mut(), a.value.as_mut()),
            None => (None, None),
        };
        let q_ad = adapter
            .and_then(|a| a.query.as_ref())
            .zip(c.q_ad.as_ref())
            .zip(gq)
            .map(|((p, cache), g)| (p, cache, scale, g));
        let v_ad = adapter
            .and_then(|a| a.value.as_ref())
            .zip(c.v_ad.as_ref())
            .zip(gv)
            .map(|((p, cache), g)| (p, cache, scale, g));
        match gw.as_mut() {
            Some(g) => {
                let dxs = dx.as_deref_mut();
                project_backward(&c.x, len, d, &dq, &w.w_q, Some((g.w_q.data_mut(), &mut g.b_q)), q_ad, dxs);
                project_backward(&c.x, len, d, &dk, &w.w_k, Some((g.w_k.data_mut(), &mut g.b_k)), None, dx.as_deref_mut());
                project_backward(&c.x, len, d, &dv, &w.w_v, Some((g.w_v.data_mut(), &mut g.b_v)), v_ad, dx.as_deref_mut());
            }
            None => {
                project_backward(&c.x, len, d, &dq, &w.w_q, None, q_ad, None);
                project_backward(&c.x, len, d, &dv, &w.w_v, None, v_ad, None);
            }
        }
    }
    if let (Some(g), Some(dx)) = (gw.as_mut(), dx.as_ref()) {
        let emb = g.embedding.data_mut();
        for (i, &t) in tokens.iter().enumerate() {
            let row = &mut emb[t as usize * d..(t as usize + 1) * d];
            row.iter_mut().zip(&dx[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
        }
    }
    finish(gw, ga)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::LoraConfig;

    fn small(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 12,
            max_len: 16,
            seed,
            ..ModelConfig::default()
        }
    }

    fn batch() -> Vec<Example> {
        vec![
            Example::from_text("the film was JOY", 1, 16),
            Example::from_text("BAD plot", 0, 16),
            Example::from_text("a", 1, 16),
        ]
    }

    #[test]
    fn probs_sum_to_one() {
        let m = Model::init(small(0)).unwrap();
        let p = m.probs(&[1, 2, 3]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(m.probs(&[]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn empty_sequence_has_flat_loss_and_no_gradient() {
        let m = Model::init(small(0)).unwrap();
        let ex = [Example { tokens: vec![], label: 1 }];
        let (loss, g) = m.loss_and_grad(&ex, Trainable::AllWeights, DropoutMode::Eval, Exec::Sequential).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!(g.weights.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_validation() {
        let m = Model::init(small(0)).unwrap();
        assert!(matches!(m.probs(&[300]), Err(ModelError::TokenOutOfRange { token: 300, .. })));
        assert!(matches!(m.probs(&[1; 17]), Err(ModelError::SequenceTooLong { len: 17, .. })));
        let bad = [Example { tokens: vec![1], label: 2 }];
        assert!(matches!(
            m.loss_and_grad(&bad, Trainable::AllWeights, DropoutMode::Eval, Exec::Sequential),
            Err(ModelError::LabelOutOfRange { label: 2, .. })
        ));
        assert!(matches!(
            m.loss_and_grad(&[], Trainable::AllWeights, DropoutMode::Eval, Exec::Sequential),
            Err(ModelError::EmptyBatch)
        ));
        assert!(matches!(
            m.loss_and_grad(&batch(), Trainable::AdaptersOnly, DropoutMode::Eval, Exec::Sequential),
            Err(ModelError::NoAdapter)
        ));
    }

    #[test]
    fn fresh_adapter_does_not_change_outputs() {
        let base = Model::init(small(1)).unwrap();
        let ad = LoraAdapter::init(LoraConfig::new(2, 4.0, 0.0), 8, 9).unwrap();
        let with = Model::new(base.weights.clone(), Some(ad)).unwrap();
        assert_eq!(base.probs(&[5, 6, 7]).unwrap(), with.probs(&[5, 6, 7]).unwrap());
    }

    #[test]
    fn unmerged_matches_merged() {
        let base = Model::init(small(2)).unwrap();
        let mut ad = LoraAdapter::init(LoraConfig::new(2, 4.0, 0.0), 8, 9).unwrap();
        let flat: Vec<f64> = (0..ad.num_params()).map(|i| ((i * 7) % 11) as f64 * 0.05 - 0.25).collect();
        ad.set_flat(&flat).unwrap();
        let m = Model::new(base.weights, Some(ad)).unwrap();
        let merged = Model::new(m.merged_weights().unwrap(), None).unwrap();
        let (a, b) = (m.probs(&[9, 8, 7, 6]).unwrap(), merged.probs(&[9, 8, 7, 6]).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let ad = LoraAdapter::init(LoraConfig::new(2, 4.0, 0.3), 8, 9).unwrap();
        let m = Model::new(Weights::init(small(3)).unwrap(), Some(ad)).unwrap();
        let mode = DropoutMode::Train { seed: 4, step: 2 };
        let a = m.loss_and_grad(&batch(), Trainable::AllWeights, mode, Exec::Parallel).unwrap();
        let b = m.loss_and_grad(&batch(), Trainable::AllWeights, mode, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn descent_lowers_loss() {
        let mut m = Model::init(small(5)).unwrap();
        let (before, g) = m.loss_and_grad(&batch(), Trainable::AllWeights, DropoutMode::Eval, Exec::Sequential).unwrap();
        m.step(&g, 0.05, Direction::Descent, None).unwrap();
        let after = m.mean_loss(&batch(), Exec::Sequential).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn bytes_round_trip_and_digest() {
        let ad = LoraAdapter::init(LoraConfig::new(2, 4.0, 0.1), 8, 9).unwrap();
        let m = Model::new(Weights::init(small(6)).unwrap(), Some(ad)).unwrap();
        let back = Model::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
        let plain = Model::init(small(6)).unwrap();
        assert_ne!(plain.digest(), m.digest());
        assert!(Model::from_bytes(&m.to_bytes()[1..]).is_err());
    }
}
