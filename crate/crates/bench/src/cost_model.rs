//! Closed-form publish, read and rekeying costs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostModelError {
    #[error("epoch length must be positive, got {0}")]
    EpochLength(f64),
    #[error("window must be non-negative, got {0}")]
    Window(f64),
    #[error("cost constant {0} must be non-negative")]
    NegativeCost(&'static str),
}

/// Per-operation costs, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OpCosts {
    pub abe_enc_ms: f64,
    pub abe_dec_ms: f64,
    pub aes_ms: f64,
    pub ledger_write_ms: f64,
    pub ledger_read_ms: f64,
    pub cas_fetch_ms: f64,
    pub ck_update_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Protected assets.
    pub m: u64,
    /// Consumers.
    pub n: u64,
    /// Policy leaf count.
    pub policy_size_k: u64,
    pub t_s: f64,
    pub l_s: f64,
    /// Revocation events in the window.
    pub r: u64,
    pub costs: OpCosts,
}

impl CostModelParams {
    /// `E = ceil(T / L)`, always recomputed.
    pub fn epochs(&self) -> Result<u64, CostModelError> {
        if !(self.l_s.is_finite() && self.l_s > 0.0) {
            return Err(CostModelError::EpochLength(self.l_s));
        }
        if !(self.t_s.is_finite() && self.t_s >= 0.0) {
            return Err(CostModelError::Window(self.t_s));
        }
        Ok((self.t_s / self.l_s).ceil() as u64)
    }

    fn check_costs(&self) -> Result<(), CostModelError> {
        let c = &self.costs;
        for (name, v) in [
            ("abe_enc_ms", c.abe_enc_ms),
            ("abe_dec_ms", c.abe_dec_ms),
            ("aes_ms", c.aes_ms),
            ("ledger_write_ms", c.ledger_write_ms),
            ("ledger_read_ms", c.ledger_read_ms),
            ("cas_fetch_ms", c.cas_fetch_ms),
            ("ck_update_ms", c.ck_update_ms),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CostModelError::NegativeCost(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostPrediction {
    pub epochs: u64,
    /// `M * (enc + ledger write)`, seconds.
    pub publish_cost_s: f64,
    /// One read: ledger read + fetch + ABE decrypt + AES, milliseconds.
    pub read_cost_ms: f64,
    pub naive_updates: u64,
    pub epoch_updates: u64,
    pub naive_rekey_cost_s: f64,
    pub epoch_rekey_cost_s: f64,
    /// `R / E`.
    pub ratio: f64,
}

pub fn predict_cost(p: &CostModelParams) -> Result<CostPrediction, CostModelError> {
    let e = p.epochs()?;
    p.check_costs()?;
    let c = &p.costs;
    let naive_updates = p.m * p.r;
    let epoch_updates = p.m * e;
    Ok(CostPrediction {
        epochs: e,
        publish_cost_s: p.m as f64 * (c.abe_enc_ms + c.ledger_write_ms) / 1000.0,
        read_cost_ms: c.ledger_read_ms + c.cas_fetch_ms + c.abe_dec_ms + c.aes_ms,
        naive_updates,
        epoch_updates,
        naive_rekey_cost_s: naive_updates as f64 * c.ck_update_ms / 1000.0,
        epoch_rekey_cost_s: epoch_updates as f64 * c.ck_update_ms / 1000.0,
        ratio: if e == 0 { 0.0 } else { p.r as f64 / e as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(l_s: f64, r: u64) -> CostModelParams {
        CostModelParams {
            m: 200,
            n: 50,
            policy_size_k: 6,
            t_s: 180.0,
            l_s,
            r,
            costs: OpCosts {
                ck_update_ms: 215.3,
                ..OpCosts::default()
            },
        }
    }

    fn within(actual: f64, target: f64, rel: f64) -> bool {
        (actual - target).abs() <= rel * target
    }

    #[test]
    fn rekey_totals() {
        let p = predict_cost(&params(60.0, 30)).unwrap();
        assert_eq!((p.epochs, p.epoch_updates, p.naive_updates), (3, 600, 6000));
        assert!(within(p.epoch_rekey_cost_s, 129.0, 0.01));
        assert!(within(p.naive_rekey_cost_s, 1292.0, 0.01));
        assert_eq!(p.ratio, 10.0);

        let p = predict_cost(&params(10.0, 30)).unwrap();
        assert_eq!((p.epochs, p.epoch_updates), (18, 3600));
        assert!(within(p.epoch_rekey_cost_s, 775.0, 0.01));
    }

    #[test]
    fn no_churn() {
        let p = predict_cost(&params(60.0, 0)).unwrap();
        assert_eq!((p.naive_rekey_cost_s, p.ratio), (0.0, 0.0));
        assert_eq!(p.epoch_updates, 600);
    }

    #[test]
    fn rejects_bad_epoch_length() {
        assert_eq!(predict_cost(&params(0.0, 1)), Err(CostModelError::EpochLength(0.0)));
        assert!(predict_cost(&params(-5.0, 1)).is_err());
    }

    #[test]
    fn partial_epoch_rounds_up() {
        let mut p = params(50.0, 3);
        p.t_s = 180.0;
        assert_eq!(predict_cost(&p).unwrap().epochs, 4);
    }
}
