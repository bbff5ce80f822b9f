//! Hyperparameter sweeps over the unlearning adapter.
//!
//! The federation is trained once per seed; every grid point then unlearns
//! from the same global model, in parallel across grid points.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::par::{self, Exec};
use crate::tinylm::LoraConfig;
use crate::unlearner::{self, UnlearnConfig, ValidationSet};

use super::scenario::{Federation, LoraGrid, ScenarioConfig};
use super::timecost::time_cost_model;
use super::HarnessError;

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

/// Sweep description, read from a JSON grid file. Missing fields take the
/// scenario defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub r: Vec<usize>,
    pub alpha: Vec<f64>,
    pub dropout: Vec<f64>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    /// Also run the retrain baseline once per seed.
    pub baseline: bool,
}

impl Default for SweepGrid {
    fn default() -> Self {
        let lora = LoraGrid::default();
        let u = UnlearnConfig::default();
        SweepGrid {
            r: lora.r,
            alpha: lora.alpha,
            dropout: lora.dropout,
            seeds: default_seeds(),
            epochs: u.epochs,
            eta: u.eta,
            batch_size: u.batch_size,
            baseline: true,
        }
    }
}

impl SweepGrid {
    pub fn lora_grid(&self) -> LoraGrid {
        LoraGrid {
            r: self.r.clone(),
            alpha: self.alpha.clone(),
            dropout: self.dropout.clone(),
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.lora_grid().is_empty() || self.seeds.is_empty() {
            return bad("sweep grid and seeds must be non-empty".into());
        }
        if self.batch_size == 0 || !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad("sweep needs batch_size >= 1 and a finite eta >= 0".into());
        }
        for l in self.lora_grid().configs() {
            l.validate(d_model).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    fn unlearn_config(&self, base: &UnlearnConfig, lora: LoraConfig) -> UnlearnConfig {
        UnlearnConfig {
            epochs: self.epochs,
            eta: self.eta,
            lora,
            batch_size: self.batch_size,
            clip: base.clip,
            loss_cap: base.loss_cap,
            normalize: base.normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub seed: u64,
    #[serde(rename = "E_u")]
    pub e_u: usize,
    pub acc_forget_before: f64,
    pub acc_forget_after: f64,
    pub acc_retain_before: f64,
    pub acc_retain_after: f64,
    pub loss_val: f64,
    pub sim_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub seed: u64,
    pub acc_forget: f64,
    pub acc_retain: f64,
    pub grad_steps: u64,
    pub rounds: usize,
    pub sim_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub baselines: Vec<BaselineRow>,
}

/// Runs every grid point for every seed. Rows come out ordered by seed, then
/// `r`, `alpha`, `dropout`.
///
/// A row's `sim_time_s` is `E_u * epoch_s + 2 * tx_s`: the unlearning epochs
/// plus the result and verification transactions.
pub fn run_sweep(cfg: &ScenarioConfig, grid: &SweepGrid) -> Result<SweepOutput, HarnessError> {
    grid.validate(cfg.model.d_model)?;
    let profile = cfg.latency_profile()?;
    let configs = grid.lora_grid().configs();
    let mut out = SweepOutput::default();
    for &seed in &grid.seeds {
        let mut fed = Federation::setup(cfg, seed)?;
        let round_cfg = cfg.round_for(seed);
        fed.train(&round_cfg, cfg.rounds, cfg.exec)?;
        let fed = &fed;
        // Grid points fan out; each run is sequential inside.
        let results = par::map(cfg.exec, &configs, |_, lora| {
            let u = grid.unlearn_config(&cfg.unlearn, lora.clone());
            fed.unlearn(&u, seed, cfg.forget_fraction, Exec::Sequential)
        });
        for (lora, res) in configs.iter().zip(results) {
            let rep = res?;
            out.rows.push(SweepRow {
                r: lora.r,
                alpha: lora.alpha,
                dropout: lora.dropout,
                seed,
                e_u: rep.epochs_run,
                acc_forget_before: rep.acc_forget_before,
                acc_forget_after: rep.acc_forget_after,
                acc_retain_before: rep.acc_retain_before,
                acc_retain_after: rep.acc_retain_after,
                loss_val: rep.loss_val,
                sim_time_s: rep.epochs_run as f64 * profile.epoch_s + 2.0 * profile.tx_s,
            });
        }
        if grid.baseline {
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
                cfg.exec,
            )?;
            let txs = fed.retain_data.len() as u64 + 1;
            out.baselines.push(BaselineRow {
                seed,
                acc_forget: b.acc_forget,
                acc_retain: b.acc_retain,
                grad_steps: b.grad_steps,
                rounds: b.rounds,
                sim_time_s: time_cost_model(&profile, b.rounds as u64, txs).enhanced_s,
            });
        }
    }
    Ok(out)
}

pub fn write_rows<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_file_defaults() {
        let g: SweepGrid = serde_json::from_str(r#"{"r": [2], "seeds": [7]}"#).unwrap();
        assert_eq!(g.r, vec![2]);
        assert_eq!(g.seeds, vec![7]);
        assert_eq!(g.alpha, LoraGrid::default().alpha);
        assert_eq!(g.epochs, 20);
    }

    #[test]
    fn rejects_bad_grids() {
        let mut g = SweepGrid::default();
        g.r.clear();
        assert!(g.validate(16).is_err());
        let g = SweepGrid {
            r: vec![32],
            ..SweepGrid::default()
        };
        assert!(g.validate(16).is_err());
        assert!(SweepGrid::default().validate(16).is_ok());
    }

    #[test]
    fn rows_roundtrip_through_csv() {
        let row = SweepRow {
            r: 4,
            alpha: 2.0,
            dropout: 0.1,
            seed: 3,
            e_u: 20,
            acc_forget_before: 1.0,
            acc_forget_after: 0.05,
            acc_retain_before: 0.99,
            acc_retain_after: 0.97,
            loss_val: 0.123456789,
            sim_time_s: 606.0,
        };
        let mut buf = Vec::new();
        write_rows(&[row.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "r,alpha,dropout,seed,E_u,acc_forget_before,acc_forget_after,acc_retain_before,acc_retain_after,loss_val,sim_time_s\n"
        ));
        assert_eq!(read_rows::<SweepRow, _>(&buf[..]).unwrap(), vec![row]);
    }
}
