//! Full-client decryption vs gateway-assisted decryption on a slowed client.

use std::time::Duration;

use epochkey_core::abe::transform_keygen;
use epochkey_core::policy::{gen_policy, PolicyForm};

use super::{payload, Env, SMALL_PAYLOAD};
use crate::emit::{ExperimentResult, Table};
use crate::stats::Summary;
use crate::{Experiment, RunConfig};

pub const SLOWDOWNS: [f64; 3] = [1.0, 2.0, 4.0];
pub const DEFAULT_TRIALS: usize = 50;
pub const POLICY: (PolicyForm, usize) = (PolicyForm::AndOfOr, 6);

#[derive(Debug, Clone)]
pub struct Row {
    pub slowdown: f64,
    pub full_client: Summary,
    /// Gateway transform plus client finish, as the client observes it.
    pub gateway_mode: Summary,
    pub gateway_transform: Summary,
    pub gateway_client: Summary,
}

impl Row {
    /// `full_client.p50 / gateway_mode.p50`.
    pub fn relief(&self) -> f64 {
        self.full_client.p50 / self.gateway_mode.p50
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub trials: usize,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn row(&self, slowdown: f64) -> Option<&Row> {
        self.rows.iter().find(|r| r.slowdown == slowdown)
    }

    /// Relative spread `(max - min) / min` of gateway-mode p50 across slowdowns.
    pub fn gateway_variation(&self) -> f64 {
        spread(self.rows.iter().map(|r| r.gateway_mode.p50))
    }

    pub fn full_client_variation(&self) -> f64 {
        spread(self.rows.iter().map(|r| r.full_client.p50))
    }
}

fn spread(xs: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = xs.fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(x), b.max(x)));
    (hi - lo) / lo
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<Report> {
    let trials = cfg.trials_or(DEFAULT_TRIALS);
    let mut env = Env::new(cfg, Experiment::Exp4)?;
    let policy = gen_policy(POLICY.1, POLICY.0, cfg.sub_seed("exp4/policy"))?;
    let data = payload(cfg.sub_seed("exp4/data"), SMALL_PAYLOAD);
    let cid = env.workflow.store("owner", &data, &policy, 0)?.cid;
    let uk = env.authority.enroll("device", policy.minimal_satisfying_set())?;
    let (tk, ek) = transform_keygen(&uk)?;

    // warm both paths once
    env.workflow.client_retrieve(&uk, &cid, 1.0)?;
    env.workflow.gateway_retrieve(&tk, &ek, &cid, 1.0)?;

    let mut rows = Vec::new();
    for slowdown in SLOWDOWNS {
        let (mut full, mut mode, mut gw, mut client) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..trials {
            let f = env.workflow.client_retrieve(&uk, &cid, slowdown)?;
            anyhow::ensure!(f.plaintext == data, "full-client path returned wrong plaintext");
            full.push(f.latency());
            let g = env.workflow.gateway_retrieve(&tk, &ek, &cid, slowdown)?;
            anyhow::ensure!(g.plaintext == data, "gateway path returned wrong plaintext");
            mode.push(g.latency());
            gw.push(g.gateway);
            client.push(g.client);
        }
        let s = |xs: &[Duration]| Summary::of_durations_ms(xs);
        rows.push(Row {
            slowdown,
            full_client: s(&full),
            gateway_mode: s(&mode),
            gateway_transform: s(&gw),
            gateway_client: s(&client),
        });
    }
    env.check_chain()?;
    Ok(Report { trials, rows })
}

impl Report {
    pub fn result(&self, cfg: &RunConfig) -> ExperimentResult {
        let mut t = Table::new(
            "exp4",
            &[
                "slowdown",
                "n",
                "full_client_p50_ms",
                "full_client_p99_ms",
                "gateway_mode_p50_ms",
                "gateway_mode_p99_ms",
                "gateway_transform_p50_ms",
                "gateway_client_p50_ms",
                "relief",
            ],
        );
        let mut plot = Table::new("exp4_latency_vs_slowdown", &["slowdown", "full_client_ms", "gateway_mode_ms"]);
        for r in &self.rows {
            t.push(vec![
                r.slowdown.into(),
                r.full_client.n.into(),
                r.full_client.p50.into(),
                r.full_client.p99.into(),
                r.gateway_mode.p50.into(),
                r.gateway_mode.p99.into(),
                r.gateway_transform.p50.into(),
                r.gateway_client.p50.into(),
                r.relief().into(),
            ]);
            plot.push(vec![r.slowdown.into(), r.full_client.p50.into(), r.gateway_mode.p50.into()]);
        }
        let mut r = ExperimentResult::new(Experiment::Exp4, cfg.mode, cfg.seed, t)
            .param("slowdowns", SLOWDOWNS)
            .param("trials", self.trials)
            .param("policy", format!("{}/{}", POLICY.0, POLICY.1))
            .param("payload_bytes", SMALL_PAYLOAD)
            .unit("full_client_p50_ms", "ms")
            .unit("gateway_mode_p50_ms", "ms")
            .unit("relief", "ratio")
            .metric("gateway_mode_variation", self.gateway_variation());
        if let Some(max) = self.rows.last() {
            r = r
                .metric("full_client_p50_ms_at_max_slowdown", max.full_client.p50)
                .metric("relief_at_max_slowdown", max.relief());
        }
        r.with_table(plot)
    }
}
