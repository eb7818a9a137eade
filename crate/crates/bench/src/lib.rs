//! Experiment harness for epochkey: calibrated and measured runs of the seven
//! experiments, the closed-form cost model, and CSV/JSON/manifest output.

pub mod calibrated;
pub mod calibration;
pub mod cost_model;
pub mod emit;
pub mod experiments;
pub mod stats;
pub mod workspace;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use epochkey_core::abe::{setup, AbeBackend, ReferenceBackend};
use epochkey_core::ledger::Durability;
use epochkey_core::workflow::{Clock, CostMode, WorkflowConfig};

pub use calibration::Calibration;
pub use emit::{ExperimentResult, Manifest, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
    Exp5,
    Exp6,
    Exp7,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Exp1,
        Experiment::Exp2,
        Experiment::Exp3,
        Experiment::Exp4,
        Experiment::Exp5,
        Experiment::Exp6,
        Experiment::Exp7,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Experiment::Exp1 => "exp1",
            Experiment::Exp2 => "exp2",
            Experiment::Exp3 => "exp3",
            Experiment::Exp4 => "exp4",
            Experiment::Exp5 => "exp5",
            Experiment::Exp6 => "exp6",
            Experiment::Exp7 => "exp7",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Experiment::Exp1 => "store/retrieve latency breakdown",
            Experiment::Exp2 => "rekeying cost under churn",
            Experiment::Exp3 => "ledger growth and read latency vs users and assets",
            Experiment::Exp4 => "gateway-assisted decryption under client slowdown",
            Experiment::Exp5 => "ledger CK path vs online key server",
            Experiment::Exp6 => "append throughput vs batch size",
            Experiment::Exp7 => "revocation case study",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown experiment {s:?} (expected exp1..exp7)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Measured,
    Calibrated,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Measured => "measured",
            Mode::Calibrated => "calibrated",
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub calibration: Calibration,
    /// Concurrent readers in exp3.
    pub workers: usize,
    /// Sleep for calibrated durations instead of only accounting them.
    pub real_sleep: bool,
    /// Overrides the per-experiment trial counts.
    pub trials: Option<usize>,
    /// Parent directory for scratch state; the system temp dir if unset.
    pub scratch: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            calibration: Calibration::builtin(),
            workers: 4,
            real_sleep: false,
            trials: None,
            scratch: None,
        }
    }

    pub fn trials_or(&self, default: usize) -> usize {
        self.trials.unwrap_or(default).max(1)
    }

    pub fn scratch_dir(&self) -> std::io::Result<tempfile::TempDir> {
        match &self.scratch {
            Some(parent) => {
                std::fs::create_dir_all(parent)?;
                tempfile::TempDir::new_in(parent)
            }
            None => tempfile::TempDir::new(),
        }
    }

    pub fn backend(&self) -> anyhow::Result<Arc<dyn AbeBackend>> {
        Ok(Arc::new(ReferenceBackend::new(setup(Some(self.seed))?)))
    }

    /// Workflow settings for one experiment's environment.
    pub fn workflow_config(&self, experiment: Experiment) -> anyhow::Result<WorkflowConfig> {
        Ok(match self.mode {
            Mode::Measured => WorkflowConfig {
                mode: CostMode::Measured,
                clock: Clock::System,
                durability: Durability::Sync,
                persist_keystore: false,
            },
            Mode::Calibrated => WorkflowConfig {
                mode: CostMode::Calibrated {
                    model: Arc::new(calibrated::CalibratedCosts::for_experiment(&self.calibration, experiment)?),
                    real_sleep: self.real_sleep,
                },
                clock: Clock::logical(),
                durability: Durability::Sync,
                persist_keystore: false,
            },
        })
    }

    /// Independent seed for a named sub-stream of this run.
    pub fn sub_seed(&self, label: &str) -> u64 {
        use sha2::{Digest, Sha256};
        let d = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(label.as_bytes())
            .finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}
