//! On-disk state behind the `epochkey` CLI.
//!
//! Layout under the workspace root:
//! `config.json` (backend), `authority.json` (epoch state), `keys/<principal>.json`
//! (latest issued key) and `store/` (ledger, CAS, owner keystore).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use epochkey_core::abe::{
    setup, transform_keygen, AbeBackend, AbeError, DaemonBackend, DaemonConfig, MasterSecret, ReferenceBackend,
    UserAttributeKey,
};
use epochkey_core::authority::{Authority, AuthorityError};
use epochkey_core::cas::ContentId;
use epochkey_core::envelope::DataKey;
use epochkey_core::ledger::{verify_bytes, ChainStatus, LedgerError, MetadataRecord};
use epochkey_core::policy::{Attribute, Policy, PolicyError};
use epochkey_core::workflow::{
    ClientOutcome, RekeyOutcome, RekeyPlan, RotationSource, StoreReceipt, Timings, Workflow, WorkflowConfig,
    WorkflowError,
};

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("{0} is not an epochkey workspace (run `init` first)")]
    NotInitialized(PathBuf),
    #[error("{0} already holds a workspace (use --force to replace it)")]
    AlreadyInitialized(PathBuf),
    #[error("no key on file for {0:?}")]
    NoKey(String),
    #[error("master secret must be 64 hex characters")]
    BadMaster,
    #[error(transparent)]
    Authority(#[from] AuthorityError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Abe(#[from] AbeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, WorkspaceError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Reference { master_hex: String },
    /// External NDJSON daemon; `seed` makes its master secret reproducible
    /// across CLI invocations.
    Daemon {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceConfig {
    pub backend: BackendConfig,
}

impl WorkspaceConfig {
    pub fn reference(seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            backend: BackendConfig::Reference {
                master_hex: setup(seed)?.to_hex(),
            },
        })
    }

    pub fn daemon(program: impl Into<PathBuf>, args: Vec<String>, seed: Option<u64>) -> Self {
        Self {
            backend: BackendConfig::Daemon {
                program: program.into(),
                args,
                seed: seed.unwrap_or_else(|| rand::rngs::OsRng.next_u64()),
            },
        }
    }

    fn backend(&self) -> Result<Arc<dyn AbeBackend>> {
        Ok(match &self.backend {
            BackendConfig::Reference { master_hex } => {
                let bytes: [u8; 32] = hex::decode(master_hex)
                    .ok()
                    .and_then(|b| b.try_into().ok())
                    .ok_or(WorkspaceError::BadMaster)?;
                Arc::new(ReferenceBackend::new(MasterSecret::from_bytes(bytes)))
            }
            BackendConfig::Daemon { program, args, seed } => Arc::new(DaemonBackend::spawn(
                &DaemonConfig::new(program).args(args.clone()),
                Some(*seed),
            )?),
        })
    }
}

pub struct Workspace {
    root: PathBuf,
    backend: Arc<dyn AbeBackend>,
    authority: Authority,
    workflow: Workflow,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|source| WorkspaceError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|source| WorkspaceError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push(b'\n');
    write_atomic(path, &text)
}

impl Workspace {
    const CONFIG: &'static str = "config.json";
    const AUTHORITY: &'static str = "authority.json";

    pub fn init(root: impl Into<PathBuf>, config: WorkspaceConfig, force: bool) -> Result<Self> {
        let root = root.into();
        let config_path = root.join(Self::CONFIG);
        if config_path.exists() {
            if !force {
                return Err(WorkspaceError::AlreadyInitialized(root));
            }
            for sub in ["keys", "store"] {
                let p = root.join(sub);
                if p.exists() {
                    fs::remove_dir_all(p)?;
                }
            }
            let _ = fs::remove_file(root.join(Self::AUTHORITY));
        }
        fs::create_dir_all(root.join("keys"))?;
        write_json(&config_path, &config)?;
        let backend = config.backend()?;
        let authority = Authority::new(backend.clone());
        fs::write(root.join(Self::AUTHORITY), authority.snapshot()?)?;
        let workflow = Self::open_workflow(&root, backend.clone())?;
        Ok(Self {
            root,
            backend,
            authority,
            workflow,
        })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let config_path = root.join(Self::CONFIG);
        if !config_path.exists() {
            return Err(WorkspaceError::NotInitialized(root));
        }
        let config: WorkspaceConfig = read_json(&config_path)?;
        let backend = config.backend()?;
        let authority = Authority::from_snapshot(backend.clone(), &fs::read_to_string(root.join(Self::AUTHORITY))?)?;
        let workflow = Self::open_workflow(&root, backend.clone())?;
        Ok(Self {
            root,
            backend,
            authority,
            workflow,
        })
    }

    fn open_workflow(root: &Path, backend: Arc<dyn AbeBackend>) -> Result<Workflow> {
        let config = WorkflowConfig {
            persist_keystore: true,
            ..WorkflowConfig::measured()
        };
        Ok(Workflow::open(root.join("store"), backend, config)?)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn backend(&self) -> &Arc<dyn AbeBackend> {
        &self.backend
    }

    pub fn authority(&self) -> &Authority {
        &self.authority
    }

    pub fn workflow(&self) -> &Workflow {
        &self.workflow
    }

    fn save_authority(&self) -> Result<()> {
        write_atomic(&self.root.join(Self::AUTHORITY), self.authority.snapshot()?.as_bytes())
    }

    fn key_path(&self, principal: &str) -> PathBuf {
        self.root.join("keys").join(format!("{principal}.json"))
    }

    fn save_key(&self, key: &UserAttributeKey) -> Result<()> {
        write_json(&self.key_path(&key.principal), key)
    }

    /// The key file the principal currently holds. A revoked principal
    /// keeps its last key.
    pub fn load_key(&self, principal: &str) -> Result<UserAttributeKey> {
        let path = self.key_path(principal);
        if !path.exists() {
            return Err(WorkspaceError::NoKey(principal.to_string()));
        }
        read_json(&path)
    }

    pub fn enroll(&mut self, principal: &str, attrs: BTreeSet<Attribute>) -> Result<UserAttributeKey> {
        let key = self.authority.enroll(principal, attrs)?;
        self.save_authority()?;
        self.save_key(&key)?;
        Ok(key)
    }

    pub fn revoke(&mut self, principal: &str) -> Result<()> {
        self.authority.revoke(principal)?;
        self.save_authority()
    }

    pub fn reinstate(&mut self, principal: &str) -> Result<()> {
        self.authority.reinstate(principal)?;
        self.save_authority()
    }

    /// Advances the epoch and rewrites the key file of every active principal.
    pub fn rollover(&mut self) -> Result<u64> {
        let r = self.authority.rollover()?;
        self.save_authority()?;
        for key in r.keys.values() {
            self.save_key(key)?;
        }
        Ok(r.epoch)
    }

    /// Stores under `base ∧ epoch`, at the current epoch unless given.
    pub fn store(&self, owner: &str, base: &Policy, epoch: Option<u64>, data: &[u8]) -> Result<StoreReceipt> {
        let epoch = epoch.unwrap_or(self.authority.current_epoch());
        Ok(self.workflow.store(owner, data, base, epoch)?)
    }

    pub fn retrieve(&self, principal: &str, cid: &ContentId) -> Result<(Vec<u8>, Timings)> {
        Ok(self.workflow.retrieve(&self.load_key(principal)?, cid)?)
    }

    /// Rotates one CK to `epoch` (default: current). With `delegate`, the
    /// data key is recovered with that principal's key instead of the
    /// owner keystore.
    pub fn rotate(
        &self,
        cid: &ContentId,
        epoch: Option<u64>,
        policy: Option<&Policy>,
        delegate: Option<&str>,
    ) -> Result<MetadataRecord> {
        let epoch = epoch.unwrap_or(self.authority.current_epoch());
        let delegate_key = delegate.map(|p| self.load_key(p)).transpose()?;
        let source = match &delegate_key {
            Some(k) => RotationSource::Delegated(k),
            None => RotationSource::OwnerKeystore,
        };
        Ok(self.workflow.rotate_ck(cid, policy, epoch, source)?.0)
    }

    /// Every object in the owner keystore, in CID order.
    pub fn owned_cids(&self) -> Vec<ContentId> {
        let mut cids: Vec<ContentId> = self.workflow.keystore().iter().map(|(c, _)| *c).collect();
        cids.sort();
        cids
    }

    /// Executes `plan` over every owned object. Each rotation round also
    /// rolls the authority forward so issued keys track the CK epoch.
    pub fn rekey(&mut self, mut plan: RekeyPlan) -> Result<RekeyOutcome> {
        let cids = self.owned_cids();
        plan.assets = cids.len();
        let outcome = self
            .workflow
            .execute_rekey(&plan, &cids, self.authority.current_epoch())?;
        while self.authority.current_epoch() < outcome.final_epoch {
            self.rollover()?;
        }
        Ok(outcome)
    }

    pub fn gateway_retrieve(&self, principal: &str, cid: &ContentId, slowdown: f64) -> Result<ClientOutcome> {
        let (tk, ek) = transform_keygen(&self.load_key(principal)?)?;
        Ok(self.workflow.gateway_retrieve(&tk, &ek, cid, slowdown)?)
    }

    /// Baseline online key server request, authorised against the
    /// principal's enrolled attributes.
    pub fn baseline_request(&self, principal: &str, cid: &ContentId) -> Result<(DataKey, Timings)> {
        let server = self.workflow.online_key_server(self.authority.state().active())?;
        Ok(self.workflow.online_key_server_request(&server, principal, cid)?)
    }

    pub fn verify_ledger(&self) -> Result<ChainStatus> {
        Ok(self.workflow.ledger().verify_chain()?)
    }

    /// Checks the ledger segment under `root` without opening the workspace,
    /// which refuses a corrupt chain.
    pub fn verify_ledger_at(root: &Path) -> Result<ChainStatus> {
        let path = root.join("store").join("ledger.seg");
        if !root.join(Self::CONFIG).exists() {
            return Err(WorkspaceError::NotInitialized(root.to_path_buf()));
        }
        match fs::read(&path) {
            Ok(bytes) => Ok(verify_bytes(&bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ChainStatus::Ok { entries: 0 }),
            Err(e) => Err(e.into()),
        }
    }
}
