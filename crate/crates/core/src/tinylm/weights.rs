use crate::ledger::canonical::{Decoder, Encoder};
use crate::seed;

use super::{Matrix, ModelConfig, ModelError};

/// Base model parameters.
///
/// Serialized as the six config fields (u64 LE, declared order) followed by
/// every tensor of [`Weights::TENSOR_NAMES`], row-major, `f64` LE.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_1: Matrix,
    pub w_2: Matrix,
    pub head: Matrix,
    pub b_q: Vec<f64>,
    pub b_k: Vec<f64>,
    pub b_v: Vec<f64>,
    pub b_o: Vec<f64>,
    pub b_1: Vec<f64>,
    pub b_2: Vec<f64>,
    pub b_head: Vec<f64>,
}

impl Weights {
    pub const TENSOR_NAMES: [&'static str; 15] = [
        "embedding", "w_q", "w_k", "w_v", "w_o", "w_1", "w_2", "head", "b_q", "b_k", "b_v", "b_o",
        "b_1", "b_2", "b_head",
    ];

    /// Expected `(rows, cols)` of every tensor, biases as single rows.
    pub fn shapes(c: &ModelConfig) -> [(usize, usize); 15] {
        let (d, f) = (c.d_model, c.d_ff);
        [
            (c.vocab, d),
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (d, f),
            (f, d),
            (d, c.n_classes),
            (1, d),
            (1, d),
            (1, d),
            (1, d),
            (1, f),
            (1, d),
            (1, c.n_classes),
        ]
    }

    /// Seeded initialization: unit-variance embeddings, `N(0, 1/fan_in)`
    /// dense matrices, zero biases.
    pub fn init(config: ModelConfig) -> Result<Weights, ModelError> {
        config.validate()?;
        let mut rng = seed::rng("tinylm/init", &[config.seed]);
        let (d, f, c) = (config.d_model, config.d_ff, config.n_classes);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        Ok(Weights {
            config,
            embedding: Matrix::randn(config.vocab, d, 1.0, &mut rng),
            w_q: Matrix::randn(d, d, fan(d), &mut rng),
            w_k: Matrix::randn(d, d, fan(d), &mut rng),
            w_v: Matrix::randn(d, d, fan(d), &mut rng),
            w_o: Matrix::randn(d, d, fan(d), &mut rng),
            w_1: Matrix::randn(d, f, fan(d), &mut rng),
            w_2: Matrix::randn(f, d, fan(f), &mut rng),
            head: Matrix::randn(d, c, fan(d), &mut rng),
            b_q: vec![0.0; d],
            b_k: vec![0.0; d],
            b_v: vec![0.0; d],
            b_o: vec![0.0; d],
            b_1: vec![0.0; f],
            b_2: vec![0.0; d],
            b_head: vec![0.0; c],
        })
    }

    /// All-zero weights of the right shape (gradient accumulators).
    pub fn zeros(config: ModelConfig) -> Weights {
        let (d, f, c) = (config.d_model, config.d_ff, config.n_classes);
        Weights {
            config,
            embedding: Matrix::zeros(config.vocab, d),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            w_1: Matrix::zeros(d, f),
            w_2: Matrix::zeros(f, d),
            head: Matrix::zeros(d, c),
            b_q: vec![0.0; d],
            b_k: vec![0.0; d],
            b_v: vec![0.0; d],
            b_o: vec![0.0; d],
            b_1: vec![0.0; f],
            b_2: vec![0.0; d],
            b_head: vec![0.0; c],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 15] {
        [
            self.embedding.data(),
            self.w_q.data(),
            self.w_k.data(),
            self.w_v.data(),
            self.w_o.data(),
            self.w_1.data(),
            self.w_2.data(),
            self.head.data(),
            &self.b_q,
            &self.b_k,
            &self.b_v,
            &self.b_o,
            &self.b_1,
            &self.b_2,
            &self.b_head,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 15] {
        [
            self.embedding.data_mut(),
            self.w_q.data_mut(),
            self.w_k.data_mut(),
            self.w_v.data_mut(),
            self.w_o.data_mut(),
            self.w_1.data_mut(),
            self.w_2.data_mut(),
            self.head.data_mut(),
            &mut self.b_q,
            &mut self.b_k,
            &mut self.b_v,
            &mut self.b_o,
            &mut self.b_1,
            &mut self.b_2,
            &mut self.b_head,
        ]
    }

    /// Checks every tensor against the config and for finiteness.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let shapes = Weights::shapes(&self.config);
        let mats = [
            &self.embedding,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_1,
            &self.w_2,
            &self.head,
        ];
        for (i, m) in mats.iter().enumerate() {
            if m.shape() != shapes[i] {
                return Err(ModelError::ShapeMismatch(format!(
                    "{} is {:?}, expected {:?}",
                    Weights::TENSOR_NAMES[i],
                    m.shape(),
                    shapes[i]
                )));
            }
        }
        for (i, t) in self.tensors().iter().enumerate().skip(mats.len()) {
            if t.len() != shapes[i].1 {
                return Err(ModelError::ShapeMismatch(format!(
                    "{} has {} entries, expected {}",
                    Weights::TENSOR_NAMES[i],
                    t.len(),
                    shapes[i].1
                )));
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(ModelError::InvalidConfig("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.num_params() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} values for {} weights",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    pub fn encode_into(&self, e: &mut Encoder) {
        let c = &self.config;
        for v in [c.vocab, c.d_model, c.d_ff, c.max_len, c.n_classes] {
            e.u64(v as u64);
        }
        e.u64(c.seed);
        for t in self.tensors() {
            for v in t {
                e.f64(*v);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode_into(&mut e);
        e.finish()
    }

    pub(crate) fn decode_from(d: &mut Decoder<'_>) -> Result<Weights, ModelError> {
        let err = |e: crate::ledger::canonical::DecodeError| ModelError::Decode(e.to_string());
        let mut dims = [0usize; 5];
        for v in dims.iter_mut() {
            *v = usize::try_from(d.u64().map_err(err)?)
                .map_err(|_| ModelError::Decode("dimension overflow".into()))?;
        }
        let config = ModelConfig {
            vocab: dims[0],
            d_model: dims[1],
            d_ff: dims[2],
            max_len: dims[3],
            n_classes: dims[4],
            seed: d.u64().map_err(err)?,
        };
        config.validate()?;
        // Guard against absurd headers before allocating.
        let total = Weights::shapes(&config)
            .iter()
            .try_fold(0usize, |acc, (r, c)| r.checked_mul(*c).and_then(|n| acc.checked_add(n)));
        if total.map_or(true, |t| t > (1 << 26)) {
            return Err(ModelError::Decode("weights too large".into()));
        }
        let mut w = Weights::zeros(config);
        for t in w.tensors_mut() {
            for v in t.iter_mut() {
                *v = d.f64().map_err(err)?;
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Weights, ModelError> {
        let mut d = Decoder::new(bytes);
        let w = Weights::decode_from(&mut d)?;
        d.finish().map_err(|e| ModelError::Decode(e.to_string()))?;
        Ok(w)
    }
}
