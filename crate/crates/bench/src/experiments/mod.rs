//! Runners for experiments 1 to 7.

pub mod exp1;
pub mod exp2;
pub mod exp3;
pub mod exp4;
pub mod exp5;
pub mod exp6;
pub mod exp7;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use tempfile::TempDir;

use epochkey_core::authority::Authority;
use epochkey_core::ledger::ChainStatus;
use epochkey_core::workflow::Workflow;

use crate::emit::{sha256_hex, ExperimentResult, Manifest};
use crate::{Experiment, RunConfig};

/// 1 KB payload used by the experiments that fix one object size.
pub const SMALL_PAYLOAD: usize = 1024;

/// A scratch workflow plus the authority that issues its keys.
pub struct Env {
    pub workflow: Workflow,
    pub authority: Authority,
    _dir: TempDir,
}

impl Env {
    pub fn new(cfg: &RunConfig, experiment: Experiment) -> anyhow::Result<Self> {
        let dir = cfg.scratch_dir().context("creating scratch directory")?;
        let backend = cfg.backend()?;
        let workflow = Workflow::open(dir.path(), backend.clone(), cfg.workflow_config(experiment)?)?;
        Ok(Self {
            workflow,
            authority: Authority::new(backend),
            _dir: dir,
        })
    }

    pub fn dir(&self) -> &Path {
        self._dir.path()
    }

    /// Fails if the ledger no longer verifies.
    pub fn check_chain(&self) -> anyhow::Result<u64> {
        match self.workflow.ledger().verify_chain()? {
            ChainStatus::Ok { entries } => Ok(entries),
            ChainStatus::Corrupt { seq, reason } => bail!("ledger corrupt at entry {seq}: {reason}"),
        }
    }
}

/// Deterministic pseudo-random payload.
pub fn payload(seed: u64, len: usize) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut buf);
    buf
}

pub fn run(experiment: Experiment, cfg: &RunConfig) -> anyhow::Result<ExperimentResult> {
    let result = match experiment {
        Experiment::Exp1 => exp1::run(cfg)?.result(cfg),
        Experiment::Exp2 => exp2::run(cfg)?.result(cfg),
        Experiment::Exp3 => exp3::run(cfg)?.result(cfg),
        Experiment::Exp4 => exp4::run(cfg)?.result(cfg),
        Experiment::Exp5 => exp5::run(cfg)?.result(cfg),
        Experiment::Exp6 => exp6::run(cfg)?.result(cfg),
        Experiment::Exp7 => exp7::run(cfg)?.result(cfg),
    };
    Ok(result)
}

/// Digest of the calibration constants in effect, recorded in the manifest.
pub fn calibration_digest(cfg: &RunConfig) -> String {
    let constants: Vec<_> = cfg.calibration.iter().collect();
    sha256_hex(&serde_json::to_vec(&constants).expect("constants serialize"))
}

/// Runs `experiments` in order, writes their outputs into `out`, then the
/// manifest covering every written file.
pub fn run_many(
    cfg: &RunConfig,
    experiments: &[Experiment],
    out: &Path,
    mut progress: impl FnMut(&ExperimentResult),
) -> anyhow::Result<Manifest> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for &e in experiments {
        let result = run(e, cfg).with_context(|| format!("running {e}"))?;
        files.extend(result.write(out)?);
        progress(&result);
    }
    let manifest = Manifest::build(out, cfg.seed, cfg.mode, experiments.to_vec(), calibration_digest(cfg), &files)?;
    manifest.write(out)?;
    Ok(manifest)
}

pub fn run_all(cfg: &RunConfig, out: &Path, progress: impl FnMut(&ExperimentResult)) -> anyhow::Result<Manifest> {
    run_many(cfg, &Experiment::ALL, out, progress)
}
