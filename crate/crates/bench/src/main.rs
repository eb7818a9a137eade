use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use epochkey_bench::experiments::{self, exp2::revocation_events};
use epochkey_bench::workspace::{Workspace, WorkspaceConfig};
use epochkey_bench::{Calibration, Experiment, Mode, RunConfig};
use epochkey_core::cas::ContentId;
use epochkey_core::ledger::ChainStatus;
use epochkey_core::policy::{attribute_set, Policy};
use epochkey_core::workflow::{as_ms, RekeyPlan, RekeyStrategy};

#[derive(Parser)]
#[command(name = "epochkey", version, about = "Epoch-based key management over a hash-chained ledger and a content-addressed store")]
struct Cli {
    /// Workspace directory for the key-management commands.
    #[arg(long, global = true, default_value = ".epochkey")]
    dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a workspace.
    Init {
        /// Derive the reference master secret (or daemon setup) from a seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use an external NDJSON ABE daemon instead of the reference backend.
        #[arg(long)]
        daemon: Option<PathBuf>,
        /// Extra argument passed to the daemon (repeatable).
        #[arg(long = "daemon-arg")]
        daemon_args: Vec<String>,
        /// Replace an existing workspace.
        #[arg(long)]
        force: bool,
    },
    /// Enroll a principal with `name=value` attributes and write its key.
    Enroll {
        principal: String,
        #[arg(required = true)]
        attributes: Vec<String>,
    },
    /// Revoke a principal; effective at the next rollover.
    Revoke { principal: String },
    /// Undo a revocation.
    Reinstate { principal: String },
    /// Advance the epoch and reissue keys to active principals.
    Rollover,
    /// Encrypt and publish a file.
    Store {
        #[arg(long)]
        owner: String,
        /// Base policy, e.g. "(role=admin OR role=maintainer) AND site=hq".
        #[arg(long)]
        policy: String,
        /// Epoch to bind (default: current).
        #[arg(long)]
        epoch: Option<u64>,
        file: PathBuf,
    },
    /// Fetch and decrypt an object with a principal's key.
    Retrieve {
        #[arg(long)]
        principal: String,
        #[arg(long)]
        cid: String,
        /// Write plaintext here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Append a fresh CK for an object without touching its payload.
    Rotate {
        #[arg(long)]
        cid: String,
        #[arg(long)]
        epoch: Option<u64>,
        /// New base policy (default: keep the current one).
        #[arg(long)]
        policy: Option<String>,
        /// Recover the data key with this principal's key.
        #[arg(long)]
        delegate: Option<String>,
    },
    /// Run a NAIVE or EPOCH rekeying plan over every owned object.
    RekeyRun(RekeyArgs),
    /// Decrypt through the transform/finish path.
    GatewayRetrieve {
        #[arg(long)]
        principal: String,
        #[arg(long)]
        cid: String,
        #[arg(long, default_value_t = 1.0)]
        slowdown: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Obtain a data key from the online key server baseline.
    BaselineRequest {
        #[arg(long)]
        principal: String,
        #[arg(long)]
        cid: String,
    },
    /// Ledger maintenance.
    Ledger {
        #[command(subcommand)]
        command: LedgerCommand,
    },
    /// Experiments.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Subcommand)]
enum LedgerCommand {
    /// Verify the hash chain; exits 1 if it is corrupt.
    Verify,
}

#[derive(Args)]
struct RekeyArgs {
    #[arg(long, value_parser = parse_strategy)]
    strategy: RekeyStrategy,
    #[arg(long, default_value_t = 180.0)]
    window: f64,
    #[arg(long, default_value_t = 60.0)]
    epoch_len: f64,
    /// Comma-separated revocation offsets in seconds.
    #[arg(long, value_delimiter = ',', conflicts_with = "churn")]
    revocations: Vec<f64>,
    /// Revocations per minute, spread evenly over the window.
    #[arg(long)]
    churn: Option<f64>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run experiments 1 to 7 in order.
    RunAll(BenchArgs),
    Exp1(BenchArgs),
    Exp2(BenchArgs),
    Exp3(BenchArgs),
    Exp4(BenchArgs),
    Exp5(BenchArgs),
    Exp6(BenchArgs),
    Exp7(BenchArgs),
}

#[derive(Args, Clone)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Mode::Calibrated)]
    mode: Mode,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Calibration TOML (default: the built-in constants).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Concurrent readers in exp3.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Override per-experiment trial counts.
    #[arg(long)]
    trials: Option<usize>,
    /// Sleep for calibrated stage costs instead of only accounting them.
    #[arg(long)]
    real_sleep: bool,
}

fn parse_strategy(s: &str) -> Result<RekeyStrategy, String> {
    match s.to_ascii_uppercase().as_str() {
        "NAIVE" => Ok(RekeyStrategy::Naive),
        "EPOCH" => Ok(RekeyStrategy::Epoch),
        _ => Err(format!("unknown strategy {s:?} (NAIVE or EPOCH)")),
    }
}

fn parse_cid(s: &str) -> anyhow::Result<ContentId> {
    s.parse().map_err(|e| anyhow::anyhow!("bad content id {s:?}: {e}"))
}

fn emit_plaintext(out: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn print_json(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json value serializes"));
}

fn bench(experiments: &[Experiment], args: BenchArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::new(args.mode, args.seed);
    if let Some(path) = &args.calibration {
        cfg.calibration = Calibration::load(path).with_context(|| format!("loading {}", path.display()))?;
    }
    cfg.workers = args.workers.max(1);
    cfg.trials = args.trials;
    cfg.real_sleep = args.real_sleep;
    let manifest = experiments::run_many(&cfg, experiments, &args.out, |r| {
        eprintln!("{}: {} ({} rows)", r.experiment, r.experiment.title(), r.table.rows.len());
    })?;
    eprintln!(
        "wrote {} files and manifest.json to {}",
        manifest.files.len(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let dir = cli.dir;
    match cli.command {
        Command::Init {
            seed,
            daemon,
            daemon_args,
            force,
        } => {
            let config = match daemon {
                Some(program) => WorkspaceConfig::daemon(program, daemon_args, seed),
                None => WorkspaceConfig::reference(seed)?,
            };
            Workspace::init(&dir, config, force)?;
            eprintln!("initialized workspace in {}", dir.display());
        }
        Command::Enroll { principal, attributes } => {
            let mut ws = Workspace::open(&dir)?;
            let key = ws.enroll(&principal, attribute_set(&attributes)?)?;
            print_json(json!({"principal": principal, "epoch": key.epoch, "attributes": key.attributes}));
        }
        Command::Revoke { principal } => {
            Workspace::open(&dir)?.revoke(&principal)?;
            eprintln!("{principal} revoked; takes effect at the next rollover");
        }
        Command::Reinstate { principal } => {
            Workspace::open(&dir)?.reinstate(&principal)?;
            eprintln!("{principal} reinstated");
        }
        Command::Rollover => {
            let epoch = Workspace::open(&dir)?.rollover()?;
            print_json(json!({"epoch": epoch}));
        }
        Command::Store {
            owner,
            policy,
            epoch,
            file,
        } => {
            let ws = Workspace::open(&dir)?;
            let data = std::fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let receipt = ws.store(&owner, &Policy::parse(&policy)?, epoch, &data)?;
            print_json(json!({"cid": receipt.cid, "epoch": receipt.epoch, "timing": receipt.timing}));
        }
        Command::Retrieve { principal, cid, out } => {
            let ws = Workspace::open(&dir)?;
            let (plain, timing) = ws.retrieve(&principal, &parse_cid(&cid)?)?;
            emit_plaintext(out.as_deref(), &plain)?;
            eprintln!("{}", serde_json::to_string(&timing)?);
        }
        Command::Rotate {
            cid,
            epoch,
            policy,
            delegate,
        } => {
            let ws = Workspace::open(&dir)?;
            let policy = policy.as_deref().map(Policy::parse).transpose()?;
            let record = ws.rotate(&parse_cid(&cid)?, epoch, policy.as_ref(), delegate.as_deref())?;
            print_json(json!({"cid": record.cid, "epoch": record.epoch, "policy_id": record.policy_id.to_string()}));
        }
        Command::RekeyRun(args) => {
            let mut ws = Workspace::open(&dir)?;
            let events = match args.churn {
                Some(c) => revocation_events(c, args.window),
                None => args.revocations,
            };
            let outcome = ws.rekey(RekeyPlan {
                strategy: args.strategy,
                window_s: args.window,
                epoch_len_s: args.epoch_len,
                assets: 0,
                revocation_events: events,
            })?;
            print_json(serde_json::to_value(&outcome)?);
        }
        Command::GatewayRetrieve {
            principal,
            cid,
            slowdown,
            out,
        } => {
            let ws = Workspace::open(&dir)?;
            let o = ws.gateway_retrieve(&principal, &parse_cid(&cid)?, slowdown)?;
            emit_plaintext(out.as_deref(), &o.plaintext)?;
            eprintln!(
                "{}",
                json!({"gateway_ms": as_ms(o.gateway), "client_ms": as_ms(o.client), "latency_ms": as_ms(o.latency())})
            );
        }
        Command::BaselineRequest { principal, cid } => {
            let ws = Workspace::open(&dir)?;
            let (key, timing) = ws.baseline_request(&principal, &parse_cid(&cid)?)?;
            let fingerprint = &epochkey_bench::emit::sha256_hex(key.as_bytes())[..16];
            print_json(json!({"key_fingerprint": fingerprint, "timing": timing}));
        }
        Command::Ledger {
            command: LedgerCommand::Verify,
        } => {
            let status = Workspace::verify_ledger_at(&dir)?;
            print_json(serde_json::to_value(&status)?);
            if let ChainStatus::Corrupt { .. } = status {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bench { command } => {
            let (exps, args): (Vec<Experiment>, BenchArgs) = match command {
                BenchCommand::RunAll(a) => (Experiment::ALL.to_vec(), a),
                BenchCommand::Exp1(a) => (vec![Experiment::Exp1], a),
                BenchCommand::Exp2(a) => (vec![Experiment::Exp2], a),
                BenchCommand::Exp3(a) => (vec![Experiment::Exp3], a),
                BenchCommand::Exp4(a) => (vec![Experiment::Exp4], a),
                BenchCommand::Exp5(a) => (vec![Experiment::Exp5], a),
                BenchCommand::Exp6(a) => (vec![Experiment::Exp6], a),
                BenchCommand::Exp7(a) => (vec![Experiment::Exp7], a),
            };
            if args.workers == 0 {
                bail!("--workers must be at least 1");
            }
            bench(&exps, args)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
