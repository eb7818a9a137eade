//! Rekeying cost under churn: NAIVE per-revocation rotation vs epoch rollover.

use epochkey_core::cas::ContentId;
use epochkey_core::policy::{gen_policy, PolicyForm};
use epochkey_core::workflow::{RekeyPlan, RekeyStrategy};

use super::{payload, Env, SMALL_PAYLOAD};
use crate::cost_model::{predict_cost, CostModelParams, OpCosts};
use crate::emit::{ExperimentResult, Table};
use crate::{Experiment, RunConfig};

pub const ASSETS: usize = 200;
pub const CONSUMERS: u64 = 50;
pub const WINDOW_S: f64 = 180.0;
pub const POLICY: (PolicyForm, usize) = (PolicyForm::AndOfOr, 6);
/// Revocations per minute.
pub const CHURN_LEVELS: [f64; 4] = [0.0, 2.0, 5.0, 10.0];
pub const EPOCH_LENGTHS: [f64; 2] = [10.0, 60.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub churn_per_min: f64,
    pub revocations: u64,
    pub strategy: RekeyStrategy,
    /// `None` for NAIVE.
    pub epoch_len_s: Option<f64>,
    /// `None` for NAIVE.
    pub epochs: Option<u64>,
    pub update_count: u64,
    pub predicted_updates: u64,
    pub ledger_entries: u64,
    pub total_cost_s: f64,
    pub model_cost_s: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<Row>,
    pub ck_update_ms: f64,
}

impl Report {
    pub fn find(&self, churn: f64, strategy: RekeyStrategy, epoch_len_s: Option<f64>) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.churn_per_min == churn && r.strategy == strategy && r.epoch_len_s == epoch_len_s)
    }
}

/// Revocation events spread evenly over the window: `R = churn * T / 60`.
pub fn revocation_events(churn_per_min: f64, window_s: f64) -> Vec<f64> {
    let r = (churn_per_min * window_s / 60.0).round() as usize;
    (0..r).map(|i| (i as f64 + 0.5) * window_s / r as f64).collect()
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<Report> {
    let env = Env::new(cfg, Experiment::Exp2)?;
    let policy = gen_policy(POLICY.1, POLICY.0, cfg.sub_seed("exp2/policy"))?;
    let seed = cfg.sub_seed("exp2/data");
    let mut assets: Vec<ContentId> = Vec::with_capacity(ASSETS);
    for i in 0..ASSETS {
        let data = payload(seed.wrapping_add(i as u64), SMALL_PAYLOAD);
        assets.push(env.workflow.store("owner", &data, &policy, 0)?.cid);
    }
    let ck_update_ms = cfg.calibration.get("exp2.ck_update_ms")?;
    let mut epoch = 0;
    let mut rows = Vec::new();
    for churn in CHURN_LEVELS {
        let events = revocation_events(churn, WINDOW_S);
        let plans = std::iter::once((RekeyStrategy::Naive, None))
            .chain(EPOCH_LENGTHS.iter().map(|l| (RekeyStrategy::Epoch, Some(*l))));
        for (strategy, epoch_len) in plans {
            let plan = RekeyPlan {
                strategy,
                window_s: WINDOW_S,
                epoch_len_s: epoch_len.unwrap_or(WINDOW_S),
                assets: ASSETS,
                revocation_events: events.clone(),
            };
            let prediction = predict_cost(&CostModelParams {
                m: ASSETS as u64,
                n: CONSUMERS,
                policy_size_k: POLICY.1 as u64,
                t_s: WINDOW_S,
                l_s: plan.epoch_len_s,
                r: events.len() as u64,
                costs: OpCosts {
                    ck_update_ms,
                    ..OpCosts::default()
                },
            })?;
            let outcome = env.workflow.execute_rekey(&plan, &assets, epoch)?;
            epoch = outcome.final_epoch;
            let (predicted_updates, model_cost_s) = match strategy {
                RekeyStrategy::Naive => (prediction.naive_updates, prediction.naive_rekey_cost_s),
                RekeyStrategy::Epoch => (prediction.epoch_updates, prediction.epoch_rekey_cost_s),
            };
            rows.push(Row {
                churn_per_min: churn,
                revocations: events.len() as u64,
                strategy,
                epoch_len_s: epoch_len,
                epochs: epoch_len.map(|_| prediction.epochs),
                update_count: outcome.update_count,
                predicted_updates,
                ledger_entries: outcome.ledger_entries,
                total_cost_s: outcome.crypto_cost.as_secs_f64(),
                model_cost_s,
            });
        }
    }
    env.check_chain()?;
    Ok(Report { rows, ck_update_ms })
}

fn strategy_label(s: RekeyStrategy) -> &'static str {
    match s {
        RekeyStrategy::Naive => "NAIVE",
        RekeyStrategy::Epoch => "EPOCH",
    }
}

impl Report {
    pub fn result(&self, cfg: &RunConfig) -> ExperimentResult {
        let mut t = Table::new(
            "exp2",
            &[
                "churn_per_min",
                "revocations",
                "strategy",
                "epoch_len_s",
                "epochs",
                "update_count",
                "predicted_updates",
                "ledger_entries",
                "total_cost_s",
                "model_cost_s",
            ],
        );
        for r in &self.rows {
            t.push(vec![
                r.churn_per_min.into(),
                r.revocations.into(),
                strategy_label(r.strategy).into(),
                r.epoch_len_s.map_or_else(|| "".into(), Into::into),
                r.epochs.map_or_else(|| "".into(), Into::into),
                r.update_count.into(),
                r.predicted_updates.into(),
                r.ledger_entries.into(),
                r.total_cost_s.into(),
                r.model_cost_s.into(),
            ]);
        }
        let mut plot = Table::new("exp2_cost_vs_churn", &["churn_per_min", "naive_s", "epoch10_s", "epoch60_s"]);
        for churn in CHURN_LEVELS {
            let cost = |s, l| self.find(churn, s, l).map_or(f64::NAN, |r| r.total_cost_s);
            plot.push(vec![
                churn.into(),
                cost(RekeyStrategy::Naive, None).into(),
                cost(RekeyStrategy::Epoch, Some(10.0)).into(),
                cost(RekeyStrategy::Epoch, Some(60.0)).into(),
            ]);
        }
        let top = CHURN_LEVELS[CHURN_LEVELS.len() - 1];
        let mut r = ExperimentResult::new(Experiment::Exp2, cfg.mode, cfg.seed, t)
            .param("assets", ASSETS)
            .param("window_s", WINDOW_S)
            .param("policy", format!("{}/{}", POLICY.0, POLICY.1))
            .param("churn_levels_per_min", CHURN_LEVELS)
            .param("epoch_lengths_s", EPOCH_LENGTHS)
            .param("model_ck_update_ms", self.ck_update_ms)
            .unit("total_cost_s", "s")
            .unit("model_cost_s", "s")
            .unit("churn_per_min", "revocations/min");
        if let (Some(n), Some(e60), Some(e10)) = (
            self.find(top, RekeyStrategy::Naive, None),
            self.find(top, RekeyStrategy::Epoch, Some(60.0)),
            self.find(top, RekeyStrategy::Epoch, Some(10.0)),
        ) {
            r = r
                .metric("naive_total_s_at_max_churn", n.total_cost_s)
                .metric("epoch60_total_s", e60.total_cost_s)
                .metric("epoch10_total_s", e10.total_cost_s)
                .metric("naive_over_epoch60", n.total_cost_s / e60.total_cost_s);
        }
        r.with_table(plot)
    }
}
