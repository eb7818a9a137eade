//! Time to a usable data key: ledger CK path vs an online key server.

use std::time::Duration;

use epochkey_core::policy::{gen_policy, PolicyForm};
use epochkey_core::workflow::Timings;

use super::{payload, Env, SMALL_PAYLOAD};
use crate::emit::{ExperimentResult, Table};
use crate::stats::Summary;
use crate::{Experiment, RunConfig};

pub const SAMPLES: usize = 50;
pub const WARMUP: usize = 5;
pub const POLICY: (PolicyForm, usize) = (PolicyForm::AndOfOr, 6);

#[derive(Debug, Clone)]
pub struct Report {
    /// ABE backend that issued and decapsulated keys.
    pub backend: String,
    pub ledger_ck: Summary,
    pub online_key_server: Summary,
}

impl Report {
    /// Online key server is faster at mean, p50 and p99.
    pub fn online_faster_everywhere(&self) -> bool {
        let (a, b) = (&self.online_key_server, &self.ledger_ck);
        a.mean < b.mean && a.p50 < b.p50 && a.p99 < b.p99
    }
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<Report> {
    let n = cfg.trials_or(SAMPLES);
    let mut env = Env::new(cfg, Experiment::Exp5)?;
    let policy = gen_policy(POLICY.1, POLICY.0, cfg.sub_seed("exp5/policy"))?;
    let seed = cfg.sub_seed("exp5/data");
    let mut cids = Vec::with_capacity(n);
    for i in 0..n {
        let data = payload(seed.wrapping_add(i as u64), SMALL_PAYLOAD);
        cids.push(env.workflow.store("owner", &data, &policy, 0)?.cid);
    }
    let uk = env.authority.enroll("client", policy.minimal_satisfying_set())?;
    let server = env.workflow.online_key_server(env.authority.state().active())?;

    let mut ledger = Vec::with_capacity(n);
    let mut online = Vec::with_capacity(n);
    for (i, cid) in cids.iter().cycle().take(WARMUP + n).enumerate() {
        let (k1, t1): (_, Timings) = env.workflow.obtain_key(&uk, cid)?;
        let (k2, t2) = env.workflow.online_key_server_request(&server, "client", cid)?;
        anyhow::ensure!(k1 == k2, "paths disagree on the data key");
        if i >= WARMUP {
            ledger.push(t1.total);
            online.push(t2.total);
        }
    }
    env.check_chain()?;
    let s = |xs: &[Duration]| Summary::of_durations_ms(xs);
    Ok(Report {
        backend: env.workflow.backend().tag().to_string(),
        ledger_ck: s(&ledger),
        online_key_server: s(&online),
    })
}

impl Report {
    pub fn result(&self, cfg: &RunConfig) -> ExperimentResult {
        let mut t = Table::new("exp5", &["path", "backend", "n", "mean_ms", "p50_ms", "p99_ms"]);
        for (path, s) in [("ledger_ck", &self.ledger_ck), ("online_key_server", &self.online_key_server)] {
            t.push(vec![
                path.into(),
                self.backend.as_str().into(),
                s.n.into(),
                s.mean.into(),
                s.p50.into(),
                s.p99.into(),
            ]);
        }
        ExperimentResult::new(Experiment::Exp5, cfg.mode, cfg.seed, t)
            .param("samples_per_path", self.ledger_ck.n)
            .param("warmup", WARMUP)
            .param("policy", format!("{}/{}", POLICY.0, POLICY.1))
            .unit("mean_ms", "ms")
            .unit("p50_ms", "ms")
            .unit("p99_ms", "ms")
            .metric("online_faster_everywhere", self.online_faster_everywhere())
    }
}
