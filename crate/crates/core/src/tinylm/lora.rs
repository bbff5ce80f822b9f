use crate::ledger::canonical::{Decoder, Encoder};
use crate::seed;

use super::{LoraConfig, LoraTarget, Matrix, ModelError, Weights};

const A_INIT_STD: f64 = 0.02;

/// Low-rank factors for one `d x d` matrix: `A (d x r)`, `B (r x d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

/// `W' = W + (alpha / r) * A * B`.
pub fn lora_merge(w: &Matrix, a: &Matrix, b: &Matrix, alpha: f64, r: usize) -> Result<Matrix, ModelError> {
    let (m, n) = w.shape();
    if a.shape() != (m, r) || b.shape() != (r, n) {
        return Err(ModelError::ShapeMismatch(format!(
            "W {m}x{n}, A {:?}, B {:?}, r {r}",
            a.shape(),
            b.shape()
        )));
    }
    if r == 0 {
        return Err(ModelError::ShapeMismatch("rank 0".into()));
    }
    w.add(&a.matmul(b)?.scale(alpha / r as f64))
}

/// Adapter for the attention query/value projections.
///
/// Flat layout: for each target in `[q, v]` order, `A` then `B`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub d_model: usize,
    pub query: Option<LoraPair>,
    pub value: Option<LoraPair>,
}

impl LoraAdapter {
    /// `A ~ N(0, 0.02^2)` from `seed`, `B = 0`, so the adapter starts as a no-op.
    pub fn init(config: LoraConfig, d_model: usize, seed: u64) -> Result<LoraAdapter, ModelError> {
        config.validate(d_model)?;
        let mut rng = seed::rng("tinylm/lora", &[seed]);
        let r = config.r;
        let mut pair = |on: bool| {
            on.then(|| LoraPair {
                a: Matrix::randn(d_model, r, A_INIT_STD, &mut rng),
                b: Matrix::zeros(r, d_model),
            })
        };
        let query = pair(config.targets.contains(&LoraTarget::Query));
        let value = pair(config.targets.contains(&LoraTarget::Value));
        Ok(LoraAdapter {
            config,
            d_model,
            query,
            value,
        })
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> LoraAdapter {
        let z = |p: &Option<LoraPair>| {
            p.as_ref().map(|p| LoraPair {
                a: Matrix::zeros(p.a.rows(), p.a.cols()),
                b: Matrix::zeros(p.b.rows(), p.b.cols()),
            })
        };
        LoraAdapter {
            config: self.config.clone(),
            d_model: self.d_model,
            query: z(&self.query),
            value: z(&self.value),
        }
    }

    pub fn scale(&self) -> f64 {
        self.config.scale()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &LoraPair> {
        self.query.iter().chain(self.value.iter())
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4);
        for p in self.query.iter_mut().chain(self.value.iter_mut()) {
            out.push(p.a.data_mut());
            out.push(p.b.data_mut());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.pairs().map(|p| p.a.data().len() + p.b.data().len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in self.pairs() {
            out.extend_from_slice(p.a.data());
            out.extend_from_slice(p.b.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.num_params() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} values for {} adapter parameters",
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

    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate(self.d_model)?;
        let (d, r) = (self.d_model, self.config.r);
        let check = |p: &Option<LoraPair>, want: bool, name: &str| -> Result<(), ModelError> {
            match (p, want) {
                (Some(p), true) if p.a.shape() == (d, r) && p.b.shape() == (r, d) => {
                    if p.a.is_finite() && p.b.is_finite() {
                        Ok(())
                    } else {
                        Err(ModelError::InvalidConfig(format!("non-finite {name} adapter")))
                    }
                }
                (None, false) => Ok(()),
                _ => Err(ModelError::ShapeMismatch(format!("{name} adapter does not match config"))),
            }
        };
        check(&self.query, self.config.targets.contains(&LoraTarget::Query), "query")?;
        check(&self.value, self.config.targets.contains(&LoraTarget::Value), "value")
    }

    /// Folds the adapter into copies of `W_q` / `W_v`.
    pub fn merge_into(&self, weights: &Weights) -> Result<Weights, ModelError> {
        if weights.config.d_model != self.d_model {
            return Err(ModelError::ShapeMismatch(format!(
                "adapter d_model {} vs model {}",
                self.d_model, weights.config.d_model
            )));
        }
        let mut out = weights.clone();
        let (alpha, r) = (self.config.alpha, self.config.r);
        if let Some(p) = &self.query {
            out.w_q = lora_merge(&weights.w_q, &p.a, &p.b, alpha, r)?;
        }
        if let Some(p) = &self.value {
            out.w_v = lora_merge(&weights.w_v, &p.a, &p.b, alpha, r)?;
        }
        Ok(out)
    }

    /// `r, alpha, dropout, target mask, d_model` header, then the flat factors.
    pub fn encode_into(&self, e: &mut Encoder) {
        let mask = self.config.targets.iter().fold(0u64, |m, t| {
            m | match t {
                LoraTarget::Query => 1,
                LoraTarget::Value => 2,
            }
        });
        e.u64(self.config.r as u64)
            .f64(self.config.alpha)
            .f64(self.config.dropout)
            .u64(mask)
            .u64(self.d_model as u64);
        for v in self.to_flat() {
            e.f64(v);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode_into(&mut e);
        e.finish()
    }

    pub(crate) fn decode_from(d: &mut Decoder<'_>) -> Result<LoraAdapter, ModelError> {
        let err = |e: crate::ledger::canonical::DecodeError| ModelError::Decode(e.to_string());
        let r = d.u64().map_err(err)? as usize;
        let alpha = d.f64().map_err(err)?;
        let dropout = d.f64().map_err(err)?;
        let mask = d.u64().map_err(err)?;
        let d_model = d.u64().map_err(err)? as usize;
        if mask == 0 || mask > 3 || d_model > 4096 {
            return Err(ModelError::Decode("bad adapter header".into()));
        }
        let mut targets = std::collections::BTreeSet::new();
        if mask & 1 != 0 {
            targets.insert(LoraTarget::Query);
        }
        if mask & 2 != 0 {
            targets.insert(LoraTarget::Value);
        }
        let config = LoraConfig {
            r,
            alpha,
            dropout,
            targets,
        };
        config.validate(d_model)?;
        let mut ad = LoraAdapter::init(config, d_model, 0)?.zeros_like();
        let mut flat = vec![0.0; ad.num_params()];
        for v in flat.iter_mut() {
            *v = d.f64().map_err(err)?;
        }
        ad.set_flat(&flat)?;
        Ok(ad)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LoraAdapter, ModelError> {
        let mut d = Decoder::new(bytes);
        let ad = LoraAdapter::decode_from(&mut d)?;
        d.finish().map_err(|e| ModelError::Decode(e.to_string()))?;
        Ok(ad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_by_hand() {
        let w = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let a = Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0, 2.0]]).unwrap();
        let merged = lora_merge(&w, &a, &b, 1.0, 1).unwrap();
        assert_eq!(merged, Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap());
    }

    #[test]
    fn zero_a_is_identity() {
        let mut rng = seed::rng("t", &[0]);
        let w = Matrix::randn(4, 4, 1.0, &mut rng);
        let b = Matrix::randn(2, 4, 1.0, &mut rng);
        assert_eq!(lora_merge(&w, &Matrix::zeros(4, 2), &b, 3.0, 2).unwrap(), w);
    }

    #[test]
    fn update_scales_with_alpha_over_r() {
        let mut rng = seed::rng("t", &[1]);
        let w = Matrix::randn(4, 4, 1.0, &mut rng);
        let a = Matrix::randn(4, 8, 1.0, &mut rng);
        let b = Matrix::randn(8, 4, 1.0, &mut rng);
        let half = lora_merge(&w, &a, &b, 4.0, 8).unwrap();
        let full = lora_merge(&w, &a, &b, 8.0, 8).unwrap();
        for i in 0..16 {
            let (h, f, w0) = (half.data()[i], full.data()[i], w.data()[i]);
            assert!(((h - w0) * 2.0 - (f - w0)).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_rejects_shapes() {
        let w = Matrix::zeros(4, 4);
        assert!(lora_merge(&w, &Matrix::zeros(4, 2), &Matrix::zeros(3, 4), 1.0, 2).is_err());
        assert!(lora_merge(&w, &Matrix::zeros(3, 2), &Matrix::zeros(2, 4), 1.0, 2).is_err());
    }

    #[test]
    fn init_has_zero_b() {
        let ad = LoraAdapter::init(LoraConfig::new(4, 8.0, 0.0), 16, 3).unwrap();
        assert!(ad.pairs().all(|p| p.b.data().iter().all(|v| *v == 0.0)));
        assert!(ad.pairs().all(|p| p.a.data().iter().any(|v| *v != 0.0)));
        assert_eq!(ad.num_params(), 2 * (16 * 4 + 4 * 16));
        assert!(ad.validate().is_ok());
    }

    #[test]
    fn bytes_round_trip() {
        let mut cfg = LoraConfig::new(2, 4.0, 0.25);
        cfg.targets.remove(&LoraTarget::Query);
        let mut ad = LoraAdapter::init(cfg, 8, 5).unwrap();
        let flat: Vec<f64> = (0..ad.num_params()).map(|i| i as f64 * 0.5).collect();
        ad.set_flat(&flat).unwrap();
        assert!(ad.query.is_none());
        assert_eq!(LoraAdapter::from_bytes(&ad.to_bytes()).unwrap(), ad);
    }
}
