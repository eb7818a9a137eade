//! Ledger growth and read latency as users and assets scale.

use std::collections::BTreeSet;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use epochkey_core::abe::UserAttributeKey;
use epochkey_core::cas::ContentId;
use epochkey_core::policy::{gen_policy, Attribute, PolicyForm, SYNTHETIC_VALUES};

use super::{payload, Env, SMALL_PAYLOAD};
use crate::emit::{ExperimentResult, Table};
use crate::stats::Summary;
use crate::{Experiment, RunConfig};

pub const USERS: [usize; 2] = [50, 200];
pub const ASSETS: [usize; 2] = [50, 200];
pub const READS_PER_USER: usize = 5;
pub const POLICY: (PolicyForm, usize) = (PolicyForm::AndOfOr, 6);

#[derive(Debug, Clone)]
pub struct Cell {
    pub users: usize,
    pub assets: usize,
    pub ledger_growth_bytes: u64,
    pub reads: usize,
    pub granted: usize,
    pub denied: usize,
    /// Over all attempts, granted or denied.
    pub latency: Summary,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub seed: u64,
    pub workers: usize,
    pub cells: Vec<Cell>,
}

impl Report {
    pub fn cell(&self, users: usize, assets: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.users == users && c.assets == assets)
    }

    /// `growth(M=max) / growth(M=min)` for a fixed user count.
    pub fn growth_ratio(&self, users: usize) -> Option<f64> {
        let lo = self.cell(users, ASSETS[0])?.ledger_growth_bytes as f64;
        let hi = self.cell(users, ASSETS[ASSETS.len() - 1])?.ledger_growth_bytes as f64;
        Some(hi / lo)
    }

    /// Relative spread `(max - min) / min` of growth across user counts.
    pub fn growth_variation(&self, assets: usize) -> Option<f64> {
        let g: Vec<f64> = USERS
            .iter()
            .map(|n| self.cell(*n, assets).map(|c| c.ledger_growth_bytes as f64))
            .collect::<Option<_>>()?;
        let (lo, hi) = g.iter().fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(*x), b.max(*x)));
        Some((hi - lo) / lo)
    }
}

/// One value per synthetic attribute name used by the policies.
fn random_attributes(rng: &mut ChaCha20Rng) -> BTreeSet<Attribute> {
    (0..POLICY.1 / 2)
        .map(|j| {
            Attribute::new(format!("attr{j}"), format!("v{}", rng.gen_range(0..SYNTHETIC_VALUES)))
                .expect("synthetic attribute is valid")
        })
        .collect()
}

fn run_cell(cfg: &RunConfig, seed: u64, users: usize, assets: usize) -> anyhow::Result<Cell> {
    let mut env = Env::new(cfg, Experiment::Exp3)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let before = env.workflow.ledger().size_bytes();
    let mut cids = Vec::with_capacity(assets);
    for i in 0..assets {
        let policy = gen_policy(POLICY.1, POLICY.0, seed.wrapping_add(i as u64))?;
        let data = payload(seed ^ (i as u64).rotate_left(32), SMALL_PAYLOAD);
        cids.push(env.workflow.store("owner", &data, &policy, 0)?.cid);
    }
    let growth = env.workflow.ledger().size_bytes() - before;

    let mut keys = Vec::with_capacity(users);
    for u in 0..users {
        keys.push(env.authority.enroll(&format!("user{u}"), random_attributes(&mut rng))?);
    }
    let plan: Vec<(usize, ContentId)> = (0..users)
        .flat_map(|u| std::iter::repeat_n(u, READS_PER_USER))
        .map(|u| (u, cids[rng.gen_range(0..cids.len())]))
        .collect();

    let outcomes = read_concurrently(&env, &keys, &plan, cfg.workers);
    env.check_chain()?;
    let granted = outcomes.iter().filter(|(ok, _)| *ok).count();
    let latencies: Vec<Duration> = outcomes.iter().map(|(_, d)| *d).collect();
    Ok(Cell {
        users,
        assets,
        ledger_growth_bytes: growth,
        reads: outcomes.len(),
        granted,
        denied: outcomes.len() - granted,
        latency: Summary::of_durations_ms(&latencies),
    })
}

/// Splits the read plan across `workers` threads; results keep plan order.
fn read_concurrently(
    env: &Env,
    keys: &[UserAttributeKey],
    plan: &[(usize, ContentId)],
    workers: usize,
) -> Vec<(bool, Duration)> {
    let chunk = plan.len().div_ceil(workers.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = plan
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|(u, cid)| {
                            let a = env.workflow.try_retrieve(&keys[*u], cid);
                            (a.outcome.is_ok(), a.timing.total)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("reader thread panicked"))
            .collect()
    })
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<Report> {
    let seed = cfg.sub_seed("exp3");
    let mut cells = Vec::new();
    for n in USERS {
        for m in ASSETS {
            cells.push(run_cell(cfg, seed, n, m)?);
        }
    }
    Ok(Report {
        seed,
        workers: cfg.workers.max(1),
        cells,
    })
}

impl Report {
    pub fn result(&self, cfg: &RunConfig) -> ExperimentResult {
        let mut t = Table::new(
            "exp3",
            &[
                "users",
                "assets",
                "ledger_growth_bytes",
                "reads",
                "granted",
                "denied",
                "mean_ms",
                "p50_ms",
                "p99_ms",
            ],
        );
        let mut growth = Table::new("exp3_growth", &["assets", "users", "ledger_growth_bytes"]);
        let mut latency = Table::new("exp3_latency", &["assets", "users", "p50_ms", "p99_ms"]);
        for c in &self.cells {
            t.push(vec![
                c.users.into(),
                c.assets.into(),
                c.ledger_growth_bytes.into(),
                c.reads.into(),
                c.granted.into(),
                c.denied.into(),
                c.latency.mean.into(),
                c.latency.p50.into(),
                c.latency.p99.into(),
            ]);
            growth.push(vec![c.assets.into(), c.users.into(), c.ledger_growth_bytes.into()]);
            latency.push(vec![
                c.assets.into(),
                c.users.into(),
                c.latency.p50.into(),
                c.latency.p99.into(),
            ]);
        }
        let mut r = ExperimentResult::new(Experiment::Exp3, cfg.mode, cfg.seed, t)
            .param("users", USERS)
            .param("assets", ASSETS)
            .param("reads_per_user", READS_PER_USER)
            .param("policy", format!("{}/{}", POLICY.0, POLICY.1))
            .param("payload_bytes", SMALL_PAYLOAD)
            .param("assignment_seed", self.seed)
            .param("workers", self.workers)
            .unit("ledger_growth_bytes", "bytes")
            .unit("mean_ms", "ms")
            .unit("p50_ms", "ms")
            .unit("p99_ms", "ms")
            .metric("total_reads", self.cells.iter().map(|c| c.reads).sum::<usize>());
        for n in USERS {
            if let Some(g) = self.growth_ratio(n) {
                r = r.metric(&format!("growth_ratio_users_{n}"), g);
            }
        }
        for m in ASSETS {
            if let Some(v) = self.growth_variation(m) {
                r = r.metric(&format!("growth_variation_assets_{m}"), v);
            }
        }
        r.with_table(growth).with_table(latency)
    }
}
