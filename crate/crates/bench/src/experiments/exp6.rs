//! Append throughput on the local log as the batch size grows.

use std::time::{Duration, Instant};

use epochkey_core::cas::ContentId;
use epochkey_core::envelope::DataKey;
use epochkey_core::ledger::{ChainStatus, Durability, Ledger, MetadataRecord};
use epochkey_core::policy::{gen_policy, PolicyForm};
use epochkey_core::workflow::Clock;

use crate::calibrated::ms;
use crate::emit::{ExperimentResult, Table};
use crate::{Mode, RunConfig};
use crate::Experiment;

pub const BATCH_SIZES: [usize; 6] = [1, 2, 5, 10, 20, 50];
pub const RECORDS: usize = 1000;
/// Measured runs per batch size; the fastest is kept.
pub const MEASURED_REPEATS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub batch_size: usize,
    pub entries: u64,
    pub records: u64,
    pub elapsed: Duration,
    pub verify_ok: bool,
}

impl Row {
    pub fn throughput_rps(&self) -> f64 {
        self.records as f64 / self.elapsed.as_secs_f64()
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<Row>,
}

impl Report {
    /// Throughput never drops as the batch grows up to `limit`.
    pub fn non_decreasing_up_to(&self, limit: usize) -> bool {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.batch_size <= limit)
            .map(Row::throughput_rps)
            .collect();
        xs.windows(2).all(|w| w[1] >= w[0])
    }
}

/// `RECORDS` valid records sharing one encapsulated key.
fn records(cfg: &RunConfig) -> anyhow::Result<Vec<MetadataRecord>> {
    let backend = cfg.backend()?;
    let base = gen_policy(6, PolicyForm::AndOfOr, cfg.sub_seed("exp6/policy"))?;
    let ck = backend.encrypt(&base.attach_epoch(0)?, &DataKey::generate()?)?.to_bytes();
    let clock = Clock::logical();
    Ok((0..RECORDS)
        .map(|i| MetadataRecord {
            cid: ContentId::of(&(i as u64).to_le_bytes()),
            ck: ck.clone(),
            policy_id: base.id(),
            epoch: 0,
            owner_id: "owner".into(),
            timestamp_us: clock.now_us() + i as u64,
        })
        .collect())
}

fn append_all(cfg: &RunConfig, batch: usize, records: &[MetadataRecord]) -> anyhow::Result<(Row, Duration)> {
    let dir = cfg.scratch_dir()?;
    let mut ledger = Ledger::open(dir.path().join("ledger.seg"))?.with_durability(Durability::Sync);
    let start = Instant::now();
    for chunk in records.chunks(batch) {
        ledger.append(chunk.to_vec())?;
    }
    let elapsed = start.elapsed();
    let verify_ok = matches!(ledger.verify_chain()?, ChainStatus::Ok { entries } if entries == ledger.entry_count());
    Ok((
        Row {
            batch_size: batch,
            entries: ledger.entry_count(),
            records: ledger.record_count(),
            elapsed,
            verify_ok,
        },
        elapsed,
    ))
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<Report> {
    let records = records(cfg)?;
    let append_ms = cfg.calibration.get("exp6.append_ms")?;
    let mut rows = Vec::new();
    for batch in BATCH_SIZES {
        let row = match cfg.mode {
            Mode::Calibrated => {
                let (mut row, _) = append_all(cfg, batch, &records)?;
                // one append overhead per chain entry
                row.elapsed = ms(append_ms) * row.entries as u32;
                row
            }
            Mode::Measured => {
                let mut best: Option<Row> = None;
                for _ in 0..MEASURED_REPEATS {
                    let (row, elapsed) = append_all(cfg, batch, &records)?;
                    anyhow::ensure!(row.verify_ok, "chain failed to verify at batch {batch}");
                    if best.as_ref().is_none_or(|b| elapsed < b.elapsed) {
                        best = Some(row);
                    }
                }
                best.expect("at least one repeat")
            }
        };
        anyhow::ensure!(row.verify_ok, "chain failed to verify at batch {batch}");
        rows.push(row);
    }
    Ok(Report { rows })
}

impl Report {
    pub fn result(&self, cfg: &RunConfig) -> ExperimentResult {
        let mut t = Table::new(
            "exp6",
            &["batch_size", "entries", "records", "elapsed_ms", "throughput_rps", "verify_chain"],
        );
        let mut plot = Table::new("exp6_throughput", &["batch_size", "throughput_rps"]);
        for r in &self.rows {
            t.push(vec![
                r.batch_size.into(),
                r.entries.into(),
                r.records.into(),
                (r.elapsed.as_secs_f64() * 1000.0).into(),
                r.throughput_rps().into(),
                if r.verify_ok { "ok" } else { "corrupt" }.into(),
            ]);
            plot.push(vec![r.batch_size.into(), r.throughput_rps().into()]);
        }
        let mut res = ExperimentResult::new(Experiment::Exp6, cfg.mode, cfg.seed, t)
            .param("batch_sizes", BATCH_SIZES)
            .param("records", RECORDS)
            .param("durability", "fsync per append")
            .unit("elapsed_ms", "ms")
            .unit("throughput_rps", "records/s")
            .metric("non_decreasing_to_batch_10", self.non_decreasing_up_to(10));
        if cfg.mode == Mode::Measured {
            res = res.param("repeats_best_of", MEASURED_REPEATS);
        }
        res.with_table(plot)
    }
}
