//! Store / retrieve pipelines, CK rotation, gateway-assisted retrieval and
//! the online key-server baseline.
//!
//! Every operation reports per-stage durations. Under
//! [`CostMode::Measured`] these are wall-clock times of the real work. Under
//! [`CostMode::Calibrated`] the same work still runs, but each stage is
//! charged the duration a [`CostModel`] assigns it and a logical clock is
//! advanced instead of reading the system time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::abe::{self, AbeBackend, AbeError, CiphertextKey, RetrievalSecret, TransformKey, UserAttributeKey};
use crate::cas::{BlobStore, CasError, CasStats, ContentId};
use crate::envelope::{self, DataKey, EnvelopeError, SealedPayload};
use crate::ledger::{Durability, Ledger, LedgerError, MetadataRecord};
use crate::policy::{Attribute, Policy, PolicyError};

pub const MIB: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Abe(#[from] AbeError),
    #[error(transparent)]
    Cas(#[from] CasError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("base policy must not contain an epoch attribute")]
    EpochInBasePolicy,
    #[error("unknown object {0}")]
    UnknownCid(ContentId),
    #[error("data key for {0} cannot be recovered")]
    KeyUnrecoverable(ContentId),
    #[error("principal {0:?} is not authorized for this object")]
    Unauthorized(String),
    #[error("invalid rekey plan: {0}")]
    InvalidPlan(String),
    #[error("client slowdown must be a finite factor >= 1, got {0}")]
    InvalidSlowdown(f64),
    #[error("keystore: {0}")]
    Keystore(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AesSeal,
    AbeEncrypt,
    CasPut,
    LedgerAppend,
    LedgerRead,
    CasGet,
    AbeDecrypt,
    AesOpen,
    GatewayTransform,
    ClientFinish,
    KeyServer,
    CkUpdate,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::AesSeal,
        Stage::AbeEncrypt,
        Stage::CasPut,
        Stage::LedgerAppend,
        Stage::LedgerRead,
        Stage::CasGet,
        Stage::AbeDecrypt,
        Stage::AesOpen,
        Stage::GatewayTransform,
        Stage::ClientFinish,
        Stage::KeyServer,
        Stage::CkUpdate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::AesSeal => "aes_seal",
            Stage::AbeEncrypt => "abe_encrypt",
            Stage::CasPut => "cas_put",
            Stage::LedgerAppend => "ledger_append",
            Stage::LedgerRead => "ledger_read",
            Stage::CasGet => "cas_get",
            Stage::AbeDecrypt => "abe_decrypt",
            Stage::AesOpen => "aes_open",
            Stage::GatewayTransform => "gateway_transform",
            Stage::ClientFinish => "client_finish",
            Stage::KeyServer => "key_server",
            Stage::CkUpdate => "ck_update",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What a cost model may look at when pricing a stage.
#[derive(Debug, Clone, Copy)]
pub struct StageContext<'a> {
    pub payload_len: usize,
    /// Base policy (no epoch leaf) of the object involved, when known.
    pub policy: Option<&'a Policy>,
}

pub trait CostModel: Send + Sync {
    fn cost(&self, stage: Stage, ctx: &StageContext<'_>) -> Duration;
}

#[derive(Clone)]
pub enum CostMode {
    Measured,
    Calibrated { model: Arc<dyn CostModel>, real_sleep: bool },
}

impl CostMode {
    pub fn calibrated(model: impl CostModel + 'static) -> Self {
        CostMode::Calibrated {
            model: Arc::new(model),
            real_sleep: false,
        }
    }

    pub fn is_calibrated(&self) -> bool {
        matches!(self, CostMode::Calibrated { .. })
    }
}

impl fmt::Debug for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostMode::Measured => f.write_str("Measured"),
            CostMode::Calibrated { real_sleep, .. } => {
                f.debug_struct("Calibrated").field("real_sleep", real_sleep).finish()
            }
        }
    }
}

/// Source of record timestamps, in microseconds since the Unix epoch.
#[derive(Debug)]
pub enum Clock {
    System,
    Logical(AtomicU64),
}

impl Clock {
    /// 2023-11-14T22:13:20Z; any fixed start works.
    pub const LOGICAL_START_US: u64 = 1_700_000_000_000_000;

    pub fn logical() -> Self {
        Clock::Logical(AtomicU64::new(Self::LOGICAL_START_US))
    }

    pub fn now_us(&self) -> u64 {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_micros() as u64)
                .unwrap_or(0),
            Clock::Logical(t) => t.load(Ordering::SeqCst),
        }
    }

    fn advance(&self, d: Duration) {
        if let Clock::Logical(t) = self {
            t.fetch_add(d.as_micros() as u64, Ordering::SeqCst);
        }
    }
}

/// Ordered per-stage durations plus the end-to-end time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    stages: Vec<(Stage, Duration)>,
    pub total: Duration,
}

impl Timings {
    fn push(&mut self, stage: Stage, d: Duration) {
        self.stages.push((stage, d));
    }

    pub fn stages(&self) -> &[(Stage, Duration)] {
        &self.stages
    }

    pub fn stage_names(&self) -> Vec<&'static str> {
        self.stages.iter().map(|(s, _)| s.name()).collect()
    }

    /// Sum of all recorded durations for `stage`.
    pub fn get(&self, stage: Stage) -> Duration {
        self.stages.iter().filter(|(s, _)| *s == stage).map(|(_, d)| *d).sum()
    }

    pub fn sum(&self) -> Duration {
        self.stages.iter().map(|(_, d)| *d).sum()
    }
}

pub fn as_us(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1_000.0
}

pub fn as_ms(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1_000_000.0
}

impl Serialize for Timings {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.stages.len() + 1))?;
        for (stage, d) in &self.stages {
            map.serialize_entry(&format!("{}_us", stage.name()), &as_us(*d))?;
        }
        map.serialize_entry("total_us", &as_us(self.total))?;
        map.end()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StoreReceipt {
    pub cid: ContentId,
    #[serde(skip)]
    pub record: MetadataRecord,
    pub epoch: u64,
    pub timing: Timings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RekeyStrategy {
    Naive,
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RekeyPlan {
    pub strategy: RekeyStrategy,
    pub window_s: f64,
    /// Epoch length; only read by [`RekeyStrategy::Epoch`].
    pub epoch_len_s: f64,
    pub assets: usize,
    /// Offsets into the window, in seconds.
    pub revocation_events: Vec<f64>,
}

impl RekeyPlan {
    pub fn validate(&self) -> Result<(), WorkflowError> {
        let bad = |m: &str| Err(WorkflowError::InvalidPlan(m.to_string()));
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            return bad("window must be positive");
        }
        if self.strategy == RekeyStrategy::Epoch && !(self.epoch_len_s.is_finite() && self.epoch_len_s > 0.0) {
            return bad("epoch length must be positive");
        }
        if self
            .revocation_events
            .iter()
            .any(|t| !t.is_finite() || *t < 0.0 || *t > self.window_s)
        {
            return bad("revocation event outside the window");
        }
        Ok(())
    }

    /// `E = ceil(T / L)`.
    pub fn epoch_count(&self) -> u64 {
        (self.window_s / self.epoch_len_s).ceil() as u64
    }

    /// Number of rotation rounds the strategy performs.
    pub fn rounds(&self) -> u64 {
        match self.strategy {
            RekeyStrategy::Naive => self.revocation_events.len() as u64,
            RekeyStrategy::Epoch => self.epoch_count(),
        }
    }

    pub fn update_count(&self) -> u64 {
        self.assets as u64 * self.rounds()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RekeyOutcome {
    pub update_count: u64,
    pub ledger_entries: u64,
    pub final_epoch: u64,
    #[serde(rename = "total_crypto_cost_s")]
    #[serde(serialize_with = "secs")]
    pub crypto_cost: Duration,
}

fn secs<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

#[derive(Debug)]
pub struct RetrieveAttempt {
    pub outcome: Result<Vec<u8>, WorkflowError>,
    /// Stages that ran, including the one that failed.
    pub timing: Timings,
}

/// Result of a client-side decryption path for one object.
#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub plaintext: Vec<u8>,
    /// Client crypto time, already multiplied by the slowdown.
    pub client: Duration,
    /// Gateway transform time; zero on the full-client path.
    pub gateway: Duration,
}

impl ClientOutcome {
    /// Decryption latency the client observes.
    pub fn latency(&self) -> Duration {
        self.client + self.gateway
    }
}

/// Where a rotation gets the data key from.
#[derive(Debug, Clone, Copy)]
pub enum RotationSource<'a> {
    /// The owner kept `K` at store time.
    OwnerKeystore,
    /// A rekey service decrypts the latest CK with its own attribute key.
    Delegated(&'a UserAttributeKey),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OwnedObject {
    pub owner: String,
    pub key: DataKey,
    pub base_policy: String,
    pub payload_len: usize,
}

/// Owner-side `cid -> K` store, optionally mirrored to a JSON file.
#[derive(Debug, Default)]
pub struct OwnerKeystore {
    path: Option<PathBuf>,
    entries: BTreeMap<ContentId, OwnedObject>,
}

impl OwnerKeystore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, WorkflowError> {
        let path = path.into();
        let entries = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| WorkflowError::Keystore(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            path: Some(path),
            entries,
        })
    }

    pub fn get(&self, cid: &ContentId) -> Option<&OwnedObject> {
        self.entries.get(cid)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ContentId, &OwnedObject)> {
        self.entries.iter()
    }

    fn insert(&mut self, cid: ContentId, obj: OwnedObject) -> Result<(), WorkflowError> {
        self.entries.insert(cid, obj);
        if let Some(path) = &self.path {
            let json = serde_json::to_vec_pretty(&self.entries).map_err(|e| WorkflowError::Keystore(e.to_string()))?;
            let tmp = path.with_extension("json.tmp");
            fs::write(&tmp, json)?;
            fs::rename(tmp, path)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum KeyServerError {
    #[error("principal {0:?} is not authorized")]
    Unauthorized(String),
    #[error("unknown object {0}")]
    UnknownCid(ContentId),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}

/// Baseline: a trusted server that holds every `K` and hands it out after a
/// policy check. The reply is sealed under a per-principal session key to
/// stand in for an authenticated channel.
#[derive(Default)]
pub struct OnlineKeyServer {
    objects: HashMap<ContentId, (DataKey, Policy)>,
    principals: HashMap<String, (BTreeSet<Attribute>, DataKey)>,
}

impl OnlineKeyServer {
    pub fn add_object(&mut self, cid: ContentId, key: DataKey, policy: Policy) {
        self.objects.insert(cid, (key, policy));
    }

    pub fn register(&mut self, principal: &str, attrs: BTreeSet<Attribute>) -> Result<(), KeyServerError> {
        self.principals
            .insert(principal.to_string(), (attrs, DataKey::generate()?));
        Ok(())
    }

    /// Server side: policy check, then `AEAD(session, K)`.
    pub fn serve(&self, principal: &str, cid: &ContentId) -> Result<SealedPayload, KeyServerError> {
        let (key, policy) = self.objects.get(cid).ok_or(KeyServerError::UnknownCid(*cid))?;
        let (attrs, session) = self
            .principals
            .get(principal)
            .ok_or_else(|| KeyServerError::Unauthorized(principal.to_string()))?;
        if !policy.satisfied_by(attrs) {
            return Err(KeyServerError::Unauthorized(principal.to_string()));
        }
        Ok(envelope::seal_with(session.as_bytes(), key.as_bytes())?)
    }

    /// Round trip as seen by the client.
    pub fn request(&self, principal: &str, cid: &ContentId) -> Result<DataKey, KeyServerError> {
        let sealed = self.serve(principal, cid)?;
        let (_, session) = &self.principals[principal];
        let raw = envelope::open(session, &sealed)?;
        Ok(DataKey::from_slice(&raw).expect("server seals 32-byte keys"))
    }
}

#[derive(Debug)]
pub struct WorkflowConfig {
    pub mode: CostMode,
    pub clock: Clock,
    pub durability: Durability,
    /// Mirror the owner keystore to `<dir>/keystore.json`.
    pub persist_keystore: bool,
}

impl WorkflowConfig {
    pub fn measured() -> Self {
        Self {
            mode: CostMode::Measured,
            clock: Clock::System,
            durability: Durability::Sync,
            persist_keystore: true,
        }
    }

    pub fn calibrated(model: impl CostModel + 'static) -> Self {
        Self {
            mode: CostMode::calibrated(model),
            clock: Clock::logical(),
            durability: Durability::Sync,
            persist_keystore: true,
        }
    }
}

pub struct Workflow {
    backend: Arc<dyn AbeBackend>,
    ledger: RwLock<Ledger>,
    cas: BlobStore,
    keystore: Mutex<OwnerKeystore>,
    mode: CostMode,
    clock: Clock,
}

impl fmt::Debug for Workflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Workflow")
            .field("backend", &self.backend.tag())
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

impl Workflow {
    /// Opens (or creates) `dir/ledger.seg`, `dir/cas/` and, if configured,
    /// `dir/keystore.json`.
    pub fn open(dir: impl AsRef<Path>, backend: Arc<dyn AbeBackend>, config: WorkflowConfig) -> Result<Self, WorkflowError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let ledger = Ledger::open(dir.join("ledger.seg"))?.with_durability(config.durability);
        let keystore = if config.persist_keystore {
            OwnerKeystore::open(dir.join("keystore.json"))?
        } else {
            OwnerKeystore::in_memory()
        };
        Ok(Self {
            backend,
            ledger: RwLock::new(ledger),
            cas: BlobStore::open(dir.join("cas"))?,
            keystore: Mutex::new(keystore),
            mode: config.mode,
            clock: config.clock,
        })
    }

    pub fn backend(&self) -> &Arc<dyn AbeBackend> {
        &self.backend
    }

    pub fn mode(&self) -> &CostMode {
        &self.mode
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn cas(&self) -> &BlobStore {
        &self.cas
    }

    pub fn cas_stats(&self) -> Result<CasStats, WorkflowError> {
        Ok(self.cas.stats()?)
    }

    pub fn ledger(&self) -> std::sync::RwLockReadGuard<'_, Ledger> {
        self.ledger.read().expect("ledger lock poisoned")
    }

    pub fn keystore(&self) -> std::sync::MutexGuard<'_, OwnerKeystore> {
        self.keystore.lock().expect("keystore lock poisoned")
    }

    /// Runs `f` as `stage` and returns the duration to charge for it, which
    /// is charged whether or not `f` succeeds.
    fn timed<T, E>(&self, stage: Stage, ctx: StageContext<'_>, f: impl FnOnce() -> Result<T, E>) -> (Result<T, E>, Duration) {
        let start = Instant::now();
        let out = f();
        let d = match &self.mode {
            CostMode::Measured => start.elapsed(),
            CostMode::Calibrated { model, real_sleep } => {
                let d = model.cost(stage, &ctx);
                if *real_sleep {
                    std::thread::sleep(d);
                }
                d
            }
        };
        self.clock.advance(d);
        (out, d)
    }

    fn stage<T, E>(&self, stage: Stage, ctx: StageContext<'_>, f: impl FnOnce() -> Result<T, E>) -> Result<(T, Duration), E> {
        let (out, d) = self.timed(stage, ctx, f);
        out.map(|v| (v, d))
    }

    /// Like [`Self::timed`] but records the stage in `t`.
    fn traced<T, E>(&self, t: &mut Timings, stage: Stage, ctx: StageContext<'_>, f: impl FnOnce() -> Result<T, E>) -> Result<T, E> {
        let (out, d) = self.timed(stage, ctx, f);
        t.push(stage, d);
        out
    }

    fn finish_total(&self, t: &mut Timings, start: Instant) {
        t.total = match self.mode {
            CostMode::Measured => start.elapsed().max(t.sum()),
            CostMode::Calibrated { .. } => t.sum(),
        };
    }

    fn make_record(&self, cid: ContentId, ck: &CiphertextKey, base: &Policy, epoch: u64, owner: &str) -> MetadataRecord {
        MetadataRecord {
            cid,
            ck: ck.to_bytes(),
            policy_id: base.id(),
            epoch,
            owner_id: owner.to_string(),
            timestamp_us: self.clock.now_us(),
        }
    }

    /// Seal, encapsulate, publish the payload, then append the record last.
    pub fn store(&self, owner: &str, data: &[u8], base_policy: &Policy, epoch: u64) -> Result<StoreReceipt, WorkflowError> {
        if base_policy.contains_epoch() {
            return Err(WorkflowError::EpochInBasePolicy);
        }
        let start = Instant::now();
        let mut t = Timings::default();
        let ctx = StageContext {
            payload_len: data.len(),
            policy: Some(base_policy),
        };
        let ((key, cf), d) = self.stage(Stage::AesSeal, ctx, || envelope::seal(data))?;
        t.push(Stage::AesSeal, d);
        let full = base_policy.attach_epoch(epoch)?;
        let (ck, d) = self.stage(Stage::AbeEncrypt, ctx, || self.backend.encrypt(&full, &key))?;
        t.push(Stage::AbeEncrypt, d);
        let cf_bytes = cf.to_bytes();
        let (cid, d) = self.stage(Stage::CasPut, ctx, || self.cas.put(&cf_bytes))?;
        t.push(Stage::CasPut, d);
        let record = self.make_record(cid, &ck, base_policy, epoch, owner);
        let (_, d) = self.stage(Stage::LedgerAppend, ctx, || {
            self.ledger.write().expect("ledger lock poisoned").append(vec![record.clone()])
        })?;
        t.push(Stage::LedgerAppend, d);
        self.keystore().insert(
            cid,
            OwnedObject {
                owner: owner.to_string(),
                key,
                base_policy: base_policy.canonical_text(),
                payload_len: data.len(),
            },
        )?;
        self.finish_total(&mut t, start);
        Ok(StoreReceipt {
            cid,
            record,
            epoch,
            timing: t,
        })
    }

    fn base_policy_of(record: &MetadataRecord) -> Result<(CiphertextKey, Policy), WorkflowError> {
        let ck = record.ciphertext_key()?;
        let base = ck.policy()?.without_epoch();
        Ok((ck, base))
    }

    /// Plaintext size of a stored object, from the blob's length on disk.
    fn payload_len_of(&self, cid: &ContentId) -> usize {
        fs::metadata(self.cas.path_of(cid))
            .map(|m| (m.len() as usize).saturating_sub(envelope::NONCE_LEN + envelope::TAG_LEN))
            .unwrap_or(0)
    }

    fn read_latest(&self, cid: &ContentId) -> Result<MetadataRecord, WorkflowError> {
        match self.ledger().latest_ck(cid) {
            Err(LedgerError::NotFound(c)) => Err(WorkflowError::UnknownCid(c)),
            other => Ok(other?),
        }
    }

    /// Retrieve that also reports the stages that ran when it fails.
    pub fn try_retrieve(&self, uk: &UserAttributeKey, cid: &ContentId) -> RetrieveAttempt {
        let start = Instant::now();
        let mut t = Timings::default();
        let outcome = self.retrieve_stages(uk, cid, &mut t);
        self.finish_total(&mut t, start);
        RetrieveAttempt { outcome, timing: t }
    }

    fn retrieve_stages(&self, uk: &UserAttributeKey, cid: &ContentId, t: &mut Timings) -> Result<Vec<u8>, WorkflowError> {
        let payload_len = self.payload_len_of(cid);
        let bare = StageContext {
            payload_len,
            policy: None,
        };
        let record = self.traced(t, Stage::LedgerRead, bare, || self.read_latest(cid))?;
        let (ck, base) = Self::base_policy_of(&record)?;
        let ctx = StageContext {
            payload_len,
            policy: Some(&base),
        };
        let cf_bytes = self.traced(t, Stage::CasGet, ctx, || self.cas.get(cid))?;
        let key = self.traced(t, Stage::AbeDecrypt, ctx, || self.backend.decrypt(uk, &ck))?;
        self.traced(t, Stage::AesOpen, ctx, || {
            SealedPayload::from_bytes(&cf_bytes).and_then(|cf| envelope::open(&key, &cf))
        })
        .map_err(Into::into)
    }

    /// Latest CK for `cid`, fetched payload and decrypted plaintext.
    pub fn retrieve(&self, uk: &UserAttributeKey, cid: &ContentId) -> Result<(Vec<u8>, Timings), WorkflowError> {
        let attempt = self.try_retrieve(uk, cid);
        attempt.outcome.map(|p| (p, attempt.timing))
    }

    /// Client path to a usable data key via the ledger: read the latest CK
    /// and decapsulate it.
    pub fn obtain_key(&self, uk: &UserAttributeKey, cid: &ContentId) -> Result<(DataKey, Timings), WorkflowError> {
        let start = Instant::now();
        let mut t = Timings::default();
        let hint = self.payload_len_of(cid);
        let (record, d) = self.stage(
            Stage::LedgerRead,
            StageContext {
                payload_len: hint,
                policy: None,
            },
            || self.read_latest(cid),
        )?;
        t.push(Stage::LedgerRead, d);
        let (ck, base) = Self::base_policy_of(&record)?;
        let (key, d) = self.stage(
            Stage::AbeDecrypt,
            StageContext {
                payload_len: hint,
                policy: Some(&base),
            },
            || self.backend.decrypt(uk, &ck),
        )?;
        t.push(Stage::AbeDecrypt, d);
        self.finish_total(&mut t, start);
        Ok((key, t))
    }

    fn recover_key(&self, cid: &ContentId, source: RotationSource<'_>) -> Result<(DataKey, Policy, String), WorkflowError> {
        match source {
            RotationSource::OwnerKeystore => {
                let ks = self.keystore();
                let obj = ks.get(cid).ok_or(WorkflowError::KeyUnrecoverable(*cid))?;
                Ok((obj.key.clone(), Policy::parse(&obj.base_policy)?, obj.owner.clone()))
            }
            RotationSource::Delegated(uk) => {
                let record = self.read_latest(cid)?;
                let (ck, base) = Self::base_policy_of(&record)?;
                let key = self.backend.decrypt(uk, &ck).map_err(|e| match e {
                    AbeError::NotSatisfied => WorkflowError::KeyUnrecoverable(*cid),
                    other => other.into(),
                })?;
                Ok((key, base, record.owner_id))
            }
        }
    }

    /// Builds the rotated record for one object without appending it.
    fn rotated_record(
        &self,
        cid: &ContentId,
        base_policy: Option<&Policy>,
        new_epoch: u64,
        source: RotationSource<'_>,
    ) -> Result<(MetadataRecord, Duration), WorkflowError> {
        if !self.ledger().cids().any(|c| c == cid) {
            return Err(WorkflowError::UnknownCid(*cid));
        }
        let (key, stored_base, owner) = self.recover_key(cid, source)?;
        let base = base_policy.cloned().unwrap_or(stored_base);
        if base.contains_epoch() {
            return Err(WorkflowError::EpochInBasePolicy);
        }
        let full = base.attach_epoch(new_epoch)?;
        let (ck, d) = self.stage(
            Stage::CkUpdate,
            StageContext {
                payload_len: 0,
                policy: Some(&base),
            },
            || self.backend.encrypt(&full, &key),
        )?;
        Ok((self.make_record(*cid, &ck, &base, new_epoch, &owner), d))
    }

    /// Re-encapsulates `K` under `base_policy ∧ epoch=new_epoch` and appends
    /// the new CK. The payload in the CAS is not touched.
    pub fn rotate_ck(
        &self,
        cid: &ContentId,
        base_policy: Option<&Policy>,
        new_epoch: u64,
        source: RotationSource<'_>,
    ) -> Result<(MetadataRecord, Duration), WorkflowError> {
        let (record, d) = self.rotated_record(cid, base_policy, new_epoch, source)?;
        self.ledger
            .write()
            .expect("ledger lock poisoned")
            .append(vec![record.clone()])?;
        Ok((record, d))
    }

    /// Rotates a batch and appends it as one ledger entry.
    pub fn rotate_batch(
        &self,
        cids: &[ContentId],
        new_epoch: u64,
        source: RotationSource<'_>,
    ) -> Result<(Vec<MetadataRecord>, Duration), WorkflowError> {
        let mut records = Vec::with_capacity(cids.len());
        let mut cost = Duration::ZERO;
        for cid in cids {
            let (r, d) = self.rotated_record(cid, None, new_epoch, source)?;
            records.push(r);
            cost += d;
        }
        if !records.is_empty() {
            self.ledger
                .write()
                .expect("ledger lock poisoned")
                .append(records.clone())?;
        }
        Ok((records, cost))
    }

    /// Runs a rekeying plan over `assets`, starting from `start_epoch`.
    ///
    /// NAIVE rotates every asset at each revocation event; EPOCH rotates
    /// every asset once per epoch boundary in the window. Each round is one
    /// ledger entry.
    pub fn execute_rekey(&self, plan: &RekeyPlan, assets: &[ContentId], start_epoch: u64) -> Result<RekeyOutcome, WorkflowError> {
        plan.validate()?;
        if assets.len() != plan.assets {
            return Err(WorkflowError::InvalidPlan(format!(
                "plan covers {} assets but {} were supplied",
                plan.assets,
                assets.len()
            )));
        }
        let mut epoch = start_epoch;
        let mut updates = 0;
        let mut cost = Duration::ZERO;
        let mut entries = 0;
        for _ in 0..plan.rounds() {
            epoch += 1;
            let (records, d) = self.rotate_batch(assets, epoch, RotationSource::OwnerKeystore)?;
            updates += records.len() as u64;
            entries += u64::from(!records.is_empty());
            cost += d;
        }
        Ok(RekeyOutcome {
            update_count: updates,
            ledger_entries: entries,
            final_epoch: epoch,
            crypto_cost: cost,
        })
    }

    fn check_slowdown(slowdown: f64) -> Result<(), WorkflowError> {
        if slowdown.is_finite() && slowdown >= 1.0 {
            Ok(())
        } else {
            Err(WorkflowError::InvalidSlowdown(slowdown))
        }
    }

    fn fetch(&self, cid: &ContentId) -> Result<(CiphertextKey, Policy, Vec<u8>), WorkflowError> {
        let record = self.read_latest(cid)?;
        let (ck, base) = Self::base_policy_of(&record)?;
        Ok((ck, base, self.cas.get(cid)?))
    }

    /// Full decryption on the (possibly constrained) client.
    pub fn client_retrieve(&self, uk: &UserAttributeKey, cid: &ContentId, slowdown: f64) -> Result<ClientOutcome, WorkflowError> {
        Self::check_slowdown(slowdown)?;
        let (ck, base, cf_bytes) = self.fetch(cid)?;
        let ctx = StageContext {
            payload_len: cf_bytes.len().saturating_sub(envelope::NONCE_LEN + envelope::TAG_LEN),
            policy: Some(&base),
        };
        let (key, d1) = self.stage(Stage::AbeDecrypt, ctx, || self.backend.decrypt(uk, &ck))?;
        let (plaintext, d2) = self.stage(Stage::AesOpen, ctx, || {
            SealedPayload::from_bytes(&cf_bytes).and_then(|cf| envelope::open(&key, &cf))
        })?;
        Ok(ClientOutcome {
            plaintext,
            client: (d1 + d2).mul_f64(slowdown),
            gateway: Duration::ZERO,
        })
    }

    /// Gateway runs the tree transform; the client only finishes and opens.
    /// Only client-side durations are scaled by `slowdown`.
    pub fn gateway_retrieve(
        &self,
        tk: &TransformKey,
        ek: &RetrievalSecret,
        cid: &ContentId,
        slowdown: f64,
    ) -> Result<ClientOutcome, WorkflowError> {
        Self::check_slowdown(slowdown)?;
        let (ck, base, cf_bytes) = self.fetch(cid)?;
        let ctx = StageContext {
            payload_len: cf_bytes.len().saturating_sub(envelope::NONCE_LEN + envelope::TAG_LEN),
            policy: Some(&base),
        };
        let (partial, gateway) = self.stage(Stage::GatewayTransform, ctx, || abe::transform(tk, &ck, ek))?;
        let (key, d1) = self.stage(Stage::ClientFinish, ctx, || abe::finish(ek, &partial))?;
        let (plaintext, d2) = self.stage(Stage::AesOpen, ctx, || {
            SealedPayload::from_bytes(&cf_bytes).and_then(|cf| envelope::open(&key, &cf))
        })?;
        Ok(ClientOutcome {
            plaintext,
            client: (d1 + d2).mul_f64(slowdown),
            gateway,
        })
    }

    /// Key server loaded with every object in the owner keystore.
    pub fn online_key_server<'a>(
        &self,
        principals: impl IntoIterator<Item = (&'a String, &'a BTreeSet<Attribute>)>,
    ) -> Result<OnlineKeyServer, WorkflowError> {
        let mut server = OnlineKeyServer::default();
        for (cid, obj) in self.keystore().iter() {
            server.add_object(*cid, obj.key.clone(), Policy::parse(&obj.base_policy)?);
        }
        for (p, attrs) in principals {
            server
                .register(p, attrs.clone())
                .map_err(|e| WorkflowError::Keystore(e.to_string()))?;
        }
        Ok(server)
    }

    /// Baseline request, timed as one [`Stage::KeyServer`] stage.
    pub fn online_key_server_request(
        &self,
        server: &OnlineKeyServer,
        principal: &str,
        cid: &ContentId,
    ) -> Result<(DataKey, Timings), WorkflowError> {
        let start = Instant::now();
        let mut t = Timings::default();
        let (key, d) = self.stage(
            Stage::KeyServer,
            StageContext {
                payload_len: 0,
                policy: None,
            },
            || server.request(principal, cid),
        )
        .map_err(|e| match e {
            KeyServerError::Unauthorized(p) => WorkflowError::Unauthorized(p),
            KeyServerError::UnknownCid(c) => WorkflowError::UnknownCid(c),
            KeyServerError::Envelope(e) => WorkflowError::Envelope(e),
        })?;
        t.push(Stage::KeyServer, d);
        self.finish_total(&mut t, start);
        Ok((key, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abe::{setup, ReferenceBackend};
    use crate::authority::Authority;
    use crate::policy::attribute_set;

    struct Flat;

    impl CostModel for Flat {
        fn cost(&self, stage: Stage, ctx: &StageContext<'_>) -> Duration {
            let per_mib = ctx.payload_len as f64 / MIB as f64;
            Duration::from_secs_f64(match stage {
                Stage::AesSeal | Stage::AesOpen => 0.0012 * per_mib,
                Stage::AbeEncrypt => 0.010 * ctx.policy.map_or(1, |p| p.leaf_count()) as f64,
                Stage::CkUpdate => 0.2,
                _ => 0.001,
            })
        }
    }

    fn setup_env(config: WorkflowConfig) -> (tempfile::TempDir, Workflow, Authority) {
        let dir = tempfile::tempdir().unwrap();
        let backend: Arc<dyn AbeBackend> = Arc::new(ReferenceBackend::new(setup(Some(11)).unwrap()));
        let wf = Workflow::open(dir.path(), backend.clone(), config).unwrap();
        let mut auth = Authority::new(backend);
        auth.enroll("alice", attribute_set(["role=admin", "site=hq"]).unwrap()).unwrap();
        auth.enroll("carl", attribute_set(["role=contractor", "site=hq"]).unwrap()).unwrap();
        auth.enroll("dana", attribute_set(["role=visitor", "site=hq"]).unwrap()).unwrap();
        (dir, wf, auth)
    }

    fn policy() -> Policy {
        Policy::parse("(role=admin OR role=contractor) AND site=hq").unwrap()
    }

    #[test]
    fn store_then_retrieve() {
        let (_d, wf, auth) = setup_env(WorkflowConfig::measured());
        let data = b"maintenance log".to_vec();
        let receipt = wf.store("owner", &data, &policy(), 0).unwrap();
        assert_eq!(receipt.timing.stage_names(), ["aes_seal", "abe_encrypt", "cas_put", "ledger_append"]);
        assert!(receipt.timing.sum() <= receipt.timing.total);
        let (pt, t) = wf.retrieve(&auth.key_for("alice").unwrap(), &receipt.cid).unwrap();
        assert_eq!(pt, data);
        assert_eq!(t.stage_names(), ["ledger_read", "cas_get", "abe_decrypt", "aes_open"]);
    }

    #[test]
    fn rejects_epoch_in_base_policy() {
        let (_d, wf, _) = setup_env(WorkflowConfig::measured());
        let p = policy().attach_epoch(0).unwrap();
        assert!(matches!(wf.store("o", b"x", &p, 0), Err(WorkflowError::EpochInBasePolicy)));
        assert_eq!(wf.ledger().record_count(), 0);
    }

    #[test]
    fn unauthorized_fails_closed() {
        let (_d, wf, auth) = setup_env(WorkflowConfig::measured());
        let r = wf.store("owner", b"secret", &policy(), 0).unwrap();
        let attempt = wf.try_retrieve(&auth.key_for("dana").unwrap(), &r.cid);
        assert!(matches!(attempt.outcome, Err(WorkflowError::Abe(AbeError::NotSatisfied))));
        assert_eq!(attempt.timing.stage_names(), ["ledger_read", "cas_get", "abe_decrypt"]);
    }

    #[test]
    fn unknown_cid() {
        let (_d, wf, auth) = setup_env(WorkflowConfig::measured());
        let cid = ContentId::of(b"none");
        assert!(matches!(
            wf.retrieve(&auth.key_for("alice").unwrap(), &cid),
            Err(WorkflowError::UnknownCid(_))
        ));
        assert!(matches!(
            wf.rotate_ck(&cid, None, 1, RotationSource::OwnerKeystore),
            Err(WorkflowError::UnknownCid(_))
        ));
    }

    #[test]
    fn rotation_leaves_payloads_alone() {
        let (_d, wf, mut auth) = setup_env(WorkflowConfig::measured());
        let cids: Vec<_> = (0..20u8)
            .map(|i| wf.store("owner", &[i; 64], &policy(), 0).unwrap().cid)
            .collect();
        let carl_old = auth.key_for("carl").unwrap();
        let before = wf.cas_stats().unwrap();
        auth.revoke("carl").unwrap();
        let rolled = auth.rollover().unwrap();
        let (records, _) = wf.rotate_batch(&cids, rolled.epoch, RotationSource::OwnerKeystore).unwrap();
        assert_eq!(records.len(), 20);
        assert_eq!(wf.cas_stats().unwrap(), before);
        assert_eq!(wf.ledger().record_count(), 40);
        for cid in &cids {
            let (pt, _) = wf.retrieve(&rolled.keys["alice"], cid).unwrap();
            assert_eq!(pt.len(), 64);
            assert!(wf.retrieve(&carl_old, cid).is_err());
            // the old CK is still there for audit
            assert_eq!(wf.ledger().history(cid).unwrap().len(), 2);
        }
    }

    #[test]
    fn delegated_rotation_matches_owner_rotation() {
        let (_d, wf, auth) = setup_env(WorkflowConfig::measured());
        let cid = wf.store("owner", b"payload", &policy(), 0).unwrap().cid;
        let service = auth.key_for("alice").unwrap();
        let (rec, _) = wf.rotate_ck(&cid, None, 1, RotationSource::Delegated(&service)).unwrap();
        assert_eq!(rec.epoch, 1);
        assert_eq!(rec.owner_id, "owner");
        assert_eq!(rec.policy_id, policy().id());
        let dana = auth.key_for("dana").unwrap();
        assert!(matches!(
            wf.rotate_ck(&cid, None, 2, RotationSource::Delegated(&dana)),
            Err(WorkflowError::KeyUnrecoverable(_))
        ));
    }

    #[test]
    fn rekey_counts_follow_plan() {
        let (_d, wf, _) = setup_env(WorkflowConfig::calibrated(Flat));
        let cids: Vec<_> = (0..5u8)
            .map(|i| wf.store("owner", &[i; 16], &policy(), 0).unwrap().cid)
            .collect();
        let epoch_plan = RekeyPlan {
            strategy: RekeyStrategy::Epoch,
            window_s: 180.0,
            epoch_len_s: 60.0,
            assets: 5,
            revocation_events: vec![1.0, 2.0],
        };
        let out = wf.execute_rekey(&epoch_plan, &cids, 0).unwrap();
        assert_eq!((out.update_count, out.ledger_entries, out.final_epoch), (15, 3, 3));
        assert!((out.crypto_cost.as_secs_f64() - 3.0).abs() < 1e-6);
        let naive = RekeyPlan {
            strategy: RekeyStrategy::Naive,
            revocation_events: vec![],
            ..epoch_plan.clone()
        };
        let out = wf.execute_rekey(&naive, &cids, 3).unwrap();
        assert_eq!((out.update_count, out.crypto_cost), (0, Duration::ZERO));
        let bad = RekeyPlan {
            epoch_len_s: 0.0,
            ..epoch_plan
        };
        assert!(matches!(wf.execute_rekey(&bad, &cids, 0), Err(WorkflowError::InvalidPlan(_))));
    }

    #[test]
    fn gateway_path_matches_direct() {
        let (_d, wf, auth) = setup_env(WorkflowConfig::calibrated(Flat));
        let cid = wf.store("owner", &[3u8; 1024], &policy(), 0).unwrap().cid;
        let uk = auth.key_for("carl").unwrap();
        let (tk, ek) = abe::transform_keygen(&uk).unwrap();
        let direct = wf.retrieve(&uk, &cid).unwrap().0;
        let gw = wf.gateway_retrieve(&tk, &ek, &cid, 4.0).unwrap();
        assert_eq!(gw.plaintext, direct);
        assert_eq!(gw.gateway, Duration::from_millis(1));
        // client work is finish + aes open, scaled 4x
        let open = Duration::from_secs_f64(0.0012 * 1024.0 / MIB as f64);
        let expected = (Duration::from_millis(1) + open).mul_f64(4.0);
        assert_eq!(gw.client, expected);
        assert!(matches!(
            wf.gateway_retrieve(&tk, &ek, &cid, 0.5),
            Err(WorkflowError::InvalidSlowdown(_))
        ));
    }

    #[test]
    fn key_server_checks_policy() {
        let (_d, wf, auth) = setup_env(WorkflowConfig::measured());
        let cid = wf.store("owner", b"x", &policy(), 0).unwrap().cid;
        let server = wf.online_key_server(auth.state().active()).unwrap();
        let (k, _) = wf.online_key_server_request(&server, "alice", &cid).unwrap();
        assert_eq!(k, wf.keystore().get(&cid).unwrap().key);
        assert!(matches!(
            wf.online_key_server_request(&server, "dana", &cid),
            Err(WorkflowError::Unauthorized(_))
        ));
        assert!(matches!(
            wf.online_key_server_request(&server, "alice", &ContentId::of(b"?")),
            Err(WorkflowError::UnknownCid(_))
        ));
    }

    #[test]
    fn calibrated_mode_uses_logical_clock() {
        let (_d, wf, _) = setup_env(WorkflowConfig::calibrated(Flat));
        let r = wf.store("owner", &vec![0u8; MIB], &policy(), 0).unwrap();
        assert_eq!(r.record.timestamp_us, Clock::LOGICAL_START_US + 1200 + 30_000 + 1000);
        assert_eq!(r.timing.total, r.timing.sum());
        assert_eq!(r.timing.get(Stage::AbeEncrypt), Duration::from_millis(30));
    }

    #[test]
    fn keystore_persists() {
        let dir = tempfile::tempdir().unwrap();
        let backend: Arc<dyn AbeBackend> = Arc::new(ReferenceBackend::new(setup(Some(1)).unwrap()));
        let cid = {
            let wf = Workflow::open(dir.path(), backend.clone(), WorkflowConfig::measured()).unwrap();
            wf.store("owner", b"kept", &policy(), 0).unwrap().cid
        };
        let wf = Workflow::open(dir.path(), backend, WorkflowConfig::measured()).unwrap();
        assert!(wf.keystore().get(&cid).is_some());
        assert!(wf.rotate_ck(&cid, None, 1, RotationSource::OwnerKeystore).is_ok());
    }
}
