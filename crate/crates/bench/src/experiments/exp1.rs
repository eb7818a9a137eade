//! Store/retrieve latency per stage over object size and policy shape.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use epochkey_core::policy::{gen_policy, Attribute, GateOp, Policy, PolicyError, PolicyForm, SYNTHETIC_VALUES};
use epochkey_core::workflow::{Stage, Timings, MIB};

use super::{payload, Env};
use crate::calibrated::EXP1_FORMS;
use crate::emit::{ExperimentResult, Table};
use crate::stats::Summary;
use crate::{Experiment, Mode, RunConfig};

pub const SIZES: [usize; 3] = [1024, 10 * 1024, MIB];
pub const DEFAULT_TRIALS: usize = 10;

pub const STORE_STAGES: [Stage; 4] = [Stage::AesSeal, Stage::AbeEncrypt, Stage::CasPut, Stage::LedgerAppend];
pub const RETRIEVE_STAGES: [Stage; 4] = [Stage::LedgerRead, Stage::CasGet, Stage::AbeDecrypt, Stage::AesOpen];

#[derive(Debug, Clone)]
pub struct Cell {
    pub size: usize,
    pub form: PolicyForm,
    pub k: usize,
    pub stages: BTreeMap<Stage, Summary>,
    pub store_e2e: Summary,
    pub retrieve_e2e: Summary,
}

impl Cell {
    pub fn stage(&self, s: Stage) -> Summary {
        self.stages[&s]
    }

    /// Share of store end-to-end spent in ABE encryption, percent of means.
    pub fn abe_share_pct(&self) -> f64 {
        100.0 * self.stage(Stage::AbeEncrypt).mean / self.store_e2e.mean
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub trials: usize,
    pub cells: Vec<Cell>,
}

impl Report {
    pub fn cell(&self, size: usize, form: PolicyForm, k: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.size == size && c.form == form && c.k == k)
    }
}

/// Grid policy for `(form, k)`. An AND_OF_OR row with odd `k` is the
/// `k - 1` leaf generated form plus one plain equality leaf.
pub fn grid_policy(form: PolicyForm, k: usize, seed: u64) -> Result<Policy, PolicyError> {
    if form != PolicyForm::AndOfOr || k.is_multiple_of(2) || k < 3 {
        return gen_policy(k, form, seed);
    }
    let mut children = match gen_policy(k - 1, form, seed)? {
        Policy::Gate(GateOp::And, groups) => groups,
        group => vec![group],
    };
    let value = ChaCha20Rng::seed_from_u64(seed ^ 0x6f64_645f_6b00).gen_range(0..SYNTHETIC_VALUES);
    children.push(Policy::leaf(Attribute::new(format!("attr{}", k / 2), format!("v{value}"))?));
    Ok(Policy::and(children))
}

fn summarize(samples: &[Timings], stages: &[Stage]) -> (BTreeMap<Stage, Summary>, Summary) {
    let mut out = BTreeMap::new();
    for &s in stages {
        let xs: Vec<Duration> = samples.iter().map(|t| t.get(s)).collect();
        out.insert(s, Summary::of_durations_ms(&xs));
    }
    let totals: Vec<Duration> = samples.iter().map(|t| t.total).collect();
    (out, Summary::of_durations_ms(&totals))
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<Report> {
    let trials = cfg.trials_or(DEFAULT_TRIALS);
    let mut cells = Vec::new();
    for (form, k) in EXP1_FORMS {
        let policy = grid_policy(form, k, cfg.sub_seed(&format!("exp1/policy/{form}/{k}")))?;
        for size in SIZES {
            let mut env = Env::new(cfg, Experiment::Exp1)?;
            let uk = env.authority.enroll("reader", policy.minimal_satisfying_set())?;
            let seed = cfg.sub_seed(&format!("exp1/data/{form}/{k}/{size}"));
            let (mut store, mut retrieve) = (Vec::new(), Vec::new());
            // trial 0 is a warmup and is not recorded
            for trial in 0..=trials {
                let data = payload(seed.wrapping_add(trial as u64), size);
                let receipt = env.workflow.store("owner", &data, &policy, 0)?;
                let (plain, t) = env.workflow.retrieve(&uk, &receipt.cid)?;
                anyhow::ensure!(plain == data, "round trip mismatch at {form} k={k} size={size}");
                if trial > 0 {
                    store.push(receipt.timing);
                    retrieve.push(t);
                }
            }
            env.check_chain()?;
            let (mut stages, store_e2e) = summarize(&store, &STORE_STAGES);
            let (rstages, retrieve_e2e) = summarize(&retrieve, &RETRIEVE_STAGES);
            stages.extend(rstages);
            cells.push(Cell {
                size,
                form,
                k,
                stages,
                store_e2e,
                retrieve_e2e,
            });
        }
    }
    Ok(Report { trials, cells })
}

impl Report {
    pub fn result(&self, cfg: &RunConfig) -> ExperimentResult {
        let mut long = Table::new(
            "exp1",
            &["size_bytes", "form", "k", "op", "stage", "n", "mean_ms", "p50_ms", "p99_ms"],
        );
        for c in &self.cells {
            let ops: [(&str, &[Stage], Summary); 2] = [
                ("store", &STORE_STAGES, c.store_e2e),
                ("retrieve", &RETRIEVE_STAGES, c.retrieve_e2e),
            ];
            for (op, stages, e2e) in ops {
                let rows = stages.iter().map(|s| (s.name(), c.stage(*s))).chain([("e2e", e2e)]);
                for (name, s) in rows {
                    long.push(vec![
                        c.size.into(),
                        c.form.to_string().into(),
                        c.k.into(),
                        op.into(),
                        name.into(),
                        s.n.into(),
                        s.mean.into(),
                        s.p50.into(),
                        s.p99.into(),
                    ]);
                }
            }
        }

        let mut summary = Table::new(
            "exp1_summary_1mib",
            &[
                "form",
                "k",
                "abe_enc_ms",
                "abe_dec_ms",
                "store_e2e_ms",
                "retrieve_e2e_ms",
                "abe_share_pct",
            ],
        );
        let mut enc_vs_k = Table::new("exp1_abe_enc_vs_k", &["form", "k", "abe_enc_ms"]);
        let mut breakdown = Table::new("exp1_store_breakdown", &["policy", "stage", "mean_ms"]);
        for c in self.cells.iter().filter(|c| c.size == MIB) {
            summary.push(vec![
                c.form.to_string().into(),
                c.k.into(),
                c.stage(Stage::AbeEncrypt).mean.into(),
                c.stage(Stage::AbeDecrypt).mean.into(),
                c.store_e2e.mean.into(),
                c.retrieve_e2e.mean.into(),
                c.abe_share_pct().into(),
            ]);
            enc_vs_k.push(vec![
                c.form.to_string().into(),
                c.k.into(),
                c.stage(Stage::AbeEncrypt).mean.into(),
            ]);
            for s in STORE_STAGES {
                breakdown.push(vec![
                    format!("{}_{}", c.form, c.k).into(),
                    s.name().into(),
                    c.stage(s).mean.into(),
                ]);
            }
        }

        let mut r = ExperimentResult::new(Experiment::Exp1, cfg.mode, cfg.seed, long)
            .param("sizes_bytes", SIZES)
            .param(
                "policies",
                EXP1_FORMS.iter().map(|(f, k)| format!("{f}/{k}")).collect::<Vec<_>>(),
            )
            .param("trials", self.trials)
            .param("warmup_trials", 1)
            .unit("mean_ms", "ms")
            .unit("p50_ms", "ms")
            .unit("p99_ms", "ms")
            .unit("size_bytes", "bytes");
        if let Some(c) = self.cell(MIB, PolicyForm::AndOfOr, 6) {
            r = r.metric("abe_share_pct_and_of_or_6_1mib", c.abe_share_pct());
        }
        if cfg.mode == Mode::Measured {
            r = r.metric("abe_enc_monotone_in_k", self.monotone_in_k());
        }
        r.with_table(summary).with_table(enc_vs_k).with_table(breakdown)
    }

    /// `abe_enc(k=6) > abe_enc(k=3)` at p50, for every form and size.
    pub fn monotone_in_k(&self) -> bool {
        SIZES.iter().all(|&size| {
            [PolicyForm::And, PolicyForm::AndOfOr].iter().all(|&form| {
                match (self.cell(size, form, 3), self.cell(size, form, 6)) {
                    (Some(a), Some(b)) => b.stage(Stage::AbeEncrypt).p50 > a.stage(Stage::AbeEncrypt).p50,
                    _ => false,
                }
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_policies_have_the_requested_shape() {
        for (form, k) in EXP1_FORMS {
            let p = grid_policy(form, k, 7).unwrap();
            assert_eq!((p.form(), p.leaf_count()), (Some(form), k), "{p}");
            assert!(p.satisfied_by(&p.minimal_satisfying_set()));
        }
        assert!(grid_policy(PolicyForm::AndOfOr, 1, 7).is_err());
    }
}
