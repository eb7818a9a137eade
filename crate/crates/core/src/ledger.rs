//! Hash-chained append-only metadata log.
//!
//! Segment file layout (integers little-endian):
//!
//! ```text
//! header: "CKLEDGER" | version u32
//! entry:  body_len u32 | seq u64 | prev_hash [32] | payload | entry_hash [32]
//! payload: record_count u32 | (record_len u32 | record)*
//! record: cid [32] | policy_id [32] | epoch u64 | timestamp_us u64
//!         | owner_len u16 | owner utf8 | ck_len u32 | ck
//! ```
//!
//! `entry_hash = SHA-256(prev_hash || seq || payload)`; the first entry links
//! to 32 zero bytes. One append writes one entry, however many records it
//! carries. An in-memory index `cid -> record locations` is rebuilt on open.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::abe::CiphertextKey;
use crate::cas::ContentId;
use crate::policy::PolicyId;

pub const LEDGER_MAGIC: &[u8; 8] = b"CKLEDGER";
pub const LEDGER_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 12;
pub const GENESIS_HASH: [u8; 32] = [0u8; 32];

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger I/O: {0}")]
    Io(#[from] io::Error),
    #[error("cannot append an empty batch")]
    EmptyBatch,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("no record for {0}")]
    NotFound(ContentId),
    #[error("ledger corrupt at entry {seq}: {reason}")]
    Corrupt { seq: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataRecord {
    pub cid: ContentId,
    /// Encoded [`CiphertextKey`].
    pub ck: Vec<u8>,
    pub policy_id: PolicyId,
    pub epoch: u64,
    pub owner_id: String,
    pub timestamp_us: u64,
}

impl MetadataRecord {
    pub fn validate(&self) -> Result<(), LedgerError> {
        if self.owner_id.is_empty() {
            return Err(LedgerError::InvalidRecord("owner_id is empty".into()));
        }
        if self.owner_id.len() > u16::MAX as usize {
            return Err(LedgerError::InvalidRecord("owner_id too long".into()));
        }
        let ck_epoch =
            CiphertextKey::peek_epoch(&self.ck).map_err(|e| LedgerError::InvalidRecord(e.to_string()))?;
        if ck_epoch != Some(self.epoch) {
            return Err(LedgerError::InvalidRecord(format!(
                "record epoch {} but ck epoch {:?}",
                self.epoch, ck_epoch
            )));
        }
        Ok(())
    }

    pub fn ciphertext_key(&self) -> Result<CiphertextKey, crate::abe::AbeError> {
        CiphertextKey::from_bytes(&self.ck)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 32 + 16 + 2 + self.owner_id.len() + 4 + self.ck.len());
        out.extend_from_slice(&self.cid.0);
        out.extend_from_slice(&self.policy_id.0);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.timestamp_us.to_le_bytes());
        out.extend_from_slice(&(self.owner_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.owner_id.as_bytes());
        out.extend_from_slice(&(self.ck.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ck);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let cid = ContentId(c.array()?);
        let policy_id = PolicyId(c.array()?);
        let epoch = c.u64()?;
        let timestamp_us = c.u64()?;
        let owner_len = u16::from_le_bytes(c.array()?) as usize;
        let owner_id = String::from_utf8(c.take(owner_len)?.to_vec()).ok()?;
        let ck_len = c.u32()? as usize;
        let ck = c.take(ck_len)?.to_vec();
        (c.pos == bytes.len()).then_some(Self {
            cid,
            ck,
            policy_id,
            epoch,
            owner_id,
            timestamp_us,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len())?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Some(out)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Option<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.array().map(u64::from_le_bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainEntry {
    pub seq: u64,
    pub prev_hash: [u8; 32],
    pub records: Vec<MetadataRecord>,
    pub entry_hash: [u8; 32],
}

fn encode_payload(records: &[MetadataRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let bytes = r.encode();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

pub fn entry_hash(prev_hash: &[u8; 32], seq: u64, payload: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev_hash);
    h.update(seq.to_le_bytes());
    h.update(payload);
    h.finalize().into()
}

/// Result of [`Ledger::verify_chain`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChainStatus {
    Ok { entries: u64 },
    Corrupt { seq: u64, reason: String },
}

impl ChainStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ChainStatus::Ok { .. })
    }
}

#[derive(Debug, Clone, Copy)]
struct RecordLocation {
    seq: u64,
    position: u32,
    epoch: u64,
    offset: u64,
    len: u32,
}

/// A decoded entry plus where its records sit in the file.
struct ScannedEntry {
    seq: u64,
    entry_hash: [u8; 32],
    records: Vec<(MetadataRecord, u64, u32)>,
}

/// Walks the segment bytes, stopping at the first inconsistency.
fn scan(bytes: &[u8]) -> (Vec<ScannedEntry>, Option<(u64, String)>) {
    let mut entries = Vec::new();
    if bytes.len() < HEADER_LEN as usize
        || &bytes[..8] != LEDGER_MAGIC
        || u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) != LEDGER_VERSION
    {
        return (entries, Some((0, "bad segment header".into())));
    }
    let mut pos = HEADER_LEN as usize;
    let mut prev = GENESIS_HASH;
    let mut expected_seq = 0u64;
    while pos < bytes.len() {
        let fail = |reason: &str| Some((expected_seq, reason.to_string()));
        let Some(len_bytes) = bytes.get(pos..pos + 4) else {
            return (entries, fail("truncated length prefix"));
        };
        let body_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        let body_start = pos + 4;
        let Some(body) = body_start.checked_add(body_len).and_then(|end| bytes.get(body_start..end)) else {
            return (entries, fail("truncated entry"));
        };
        if body.len() < 8 + 32 + 4 + 32 {
            return (entries, fail("entry too short"));
        }
        let seq = u64::from_le_bytes(body[..8].try_into().expect("8 bytes"));
        let prev_hash: [u8; 32] = body[8..40].try_into().expect("32 bytes");
        let payload = &body[40..body.len() - 32];
        let stored_hash: [u8; 32] = body[body.len() - 32..].try_into().expect("32 bytes");
        if entry_hash(&prev_hash, seq, payload) != stored_hash {
            return (entries, fail("entry hash mismatch"));
        }
        if seq != expected_seq {
            return (entries, fail("sequence gap"));
        }
        if prev_hash != prev {
            return (entries, fail("broken link to previous entry"));
        }
        let payload_offset = (body_start + 40) as u64;
        let mut c = Cursor { bytes: payload, pos: 0 };
        let Some(count) = c.u32() else {
            return (entries, fail("missing record count"));
        };
        let mut records = Vec::with_capacity(count as usize);
        for i in 0..count {
            let decoded = c.u32().and_then(|len| {
                let offset = payload_offset + c.pos as u64;
                c.take(len as usize)
                    .and_then(MetadataRecord::decode)
                    .map(|r| (r, offset, len))
            });
            match decoded {
                Some((r, offset, len)) => records.push((r, offset, len)),
                None => return (entries, fail(&format!("undecodable record {i}"))),
            }
        }
        if c.pos != payload.len() || records.is_empty() {
            return (entries, fail("bad record framing"));
        }
        entries.push(ScannedEntry {
            seq,
            entry_hash: stored_hash,
            records,
        });
        prev = stored_hash;
        expected_seq += 1;
        pos = body_start + body_len;
    }
    (entries, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Durability {
    /// `fsync` every append before returning.
    Sync,
    /// Leave flushing to the OS.
    Buffered,
}

#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    writer: File,
    reader: File,
    head_hash: [u8; 32],
    next_seq: u64,
    size: u64,
    record_count: u64,
    index: HashMap<ContentId, Vec<RecordLocation>>,
    durability: Durability,
}

impl Ledger {
    /// Opens or creates a segment file, rebuilding the index.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if !path.exists() {
            let mut f = File::create(&path)?;
            f.write_all(LEDGER_MAGIC)?;
            f.write_all(&LEDGER_VERSION.to_le_bytes())?;
            f.sync_all()?;
        }
        let bytes = fs::read(&path)?;
        let (entries, failure) = scan(&bytes);
        if let Some((seq, reason)) = failure {
            return Err(LedgerError::Corrupt { seq, reason });
        }
        let mut index: HashMap<ContentId, Vec<RecordLocation>> = HashMap::new();
        let mut record_count = 0;
        let mut head_hash = GENESIS_HASH;
        for entry in &entries {
            for (position, (record, offset, len)) in entry.records.iter().enumerate() {
                index.entry(record.cid).or_default().push(RecordLocation {
                    seq: entry.seq,
                    position: position as u32,
                    epoch: record.epoch,
                    offset: *offset,
                    len: *len,
                });
                record_count += 1;
            }
            head_hash = entry.entry_hash;
        }
        Ok(Self {
            writer: OpenOptions::new().append(true).open(&path)?,
            reader: File::open(&path)?,
            path,
            head_hash,
            next_seq: entries.len() as u64,
            size: bytes.len() as u64,
            record_count,
            index,
            durability: Durability::Sync,
        })
    }

    pub fn with_durability(mut self, durability: Durability) -> Self {
        self.durability = durability;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entry_count(&self) -> u64 {
        self.next_seq
    }

    pub fn record_count(&self) -> u64 {
        self.record_count
    }

    /// Serialized size of the segment file, header included.
    pub fn size_bytes(&self) -> u64 {
        self.size
    }

    pub fn head_hash(&self) -> [u8; 32] {
        self.head_hash
    }

    /// Appends `records` as one chain entry.
    pub fn append(&mut self, records: Vec<MetadataRecord>) -> Result<ChainEntry, LedgerError> {
        if records.is_empty() {
            return Err(LedgerError::EmptyBatch);
        }
        for r in &records {
            r.validate()?;
        }
        let seq = self.next_seq;
        let payload = encode_payload(&records);
        let hash = entry_hash(&self.head_hash, seq, &payload);
        let body_len = 8 + 32 + payload.len() + 32;
        let mut frame = Vec::with_capacity(4 + body_len);
        frame.extend_from_slice(&(body_len as u32).to_le_bytes());
        frame.extend_from_slice(&seq.to_le_bytes());
        frame.extend_from_slice(&self.head_hash);
        frame.extend_from_slice(&payload);
        frame.extend_from_slice(&hash);
        self.writer.write_all(&frame)?;
        if self.durability == Durability::Sync {
            self.writer.sync_data()?;
        }

        let mut offset = self.size + 4 + 8 + 32 + 4;
        for (position, r) in records.iter().enumerate() {
            let len = r.encode().len() as u32;
            self.index.entry(r.cid).or_default().push(RecordLocation {
                seq,
                position: position as u32,
                epoch: r.epoch,
                offset: offset + 4,
                len,
            });
            offset += 4 + len as u64;
        }
        self.size += frame.len() as u64;
        self.record_count += records.len() as u64;
        self.next_seq += 1;
        let entry = ChainEntry {
            seq,
            prev_hash: self.head_hash,
            records,
            entry_hash: hash,
        };
        self.head_hash = hash;
        Ok(entry)
    }

    fn read_record(&self, loc: &RecordLocation) -> Result<MetadataRecord, LedgerError> {
        let mut buf = vec![0u8; loc.len as usize];
        self.reader.read_exact_at(&mut buf, loc.offset)?;
        MetadataRecord::decode(&buf).ok_or_else(|| LedgerError::Corrupt {
            seq: loc.seq,
            reason: "record no longer decodes".into(),
        })
    }

    /// Record for `cid` with the highest epoch; ties go to the most recent append.
    pub fn latest_ck(&self, cid: &ContentId) -> Result<MetadataRecord, LedgerError> {
        let loc = self
            .index
            .get(cid)
            .and_then(|locs| locs.iter().max_by_key(|l| (l.epoch, l.seq, l.position)))
            .ok_or(LedgerError::NotFound(*cid))?;
        self.read_record(loc)
    }

    /// Every record for `cid`, in append order.
    pub fn history(&self, cid: &ContentId) -> Result<Vec<MetadataRecord>, LedgerError> {
        self.index
            .get(cid)
            .map(|locs| locs.iter().map(|l| self.read_record(l)).collect())
            .unwrap_or_else(|| Ok(Vec::new()))
    }

    pub fn cids(&self) -> impl Iterator<Item = &ContentId> {
        self.index.keys()
    }

    /// All entries, decoded from disk.
    pub fn entries(&self) -> Result<Vec<ChainEntry>, LedgerError> {
        let bytes = fs::read(&self.path)?;
        let (scanned, failure) = scan(&bytes);
        if let Some((seq, reason)) = failure {
            return Err(LedgerError::Corrupt { seq, reason });
        }
        let mut prev = GENESIS_HASH;
        Ok(scanned
            .into_iter()
            .map(|e| {
                let entry = ChainEntry {
                    seq: e.seq,
                    prev_hash: prev,
                    records: e.records.into_iter().map(|(r, _, _)| r).collect(),
                    entry_hash: e.entry_hash,
                };
                prev = e.entry_hash;
                entry
            })
            .collect())
    }

    /// Re-reads the segment from disk and checks every hash and link.
    pub fn verify_chain(&self) -> Result<ChainStatus, LedgerError> {
        let status = verify_file(&self.path)?;
        Ok(match status {
            ChainStatus::Ok { entries } if entries < self.next_seq => ChainStatus::Corrupt {
                seq: entries,
                reason: format!("segment ends after {entries} of {} entries", self.next_seq),
            },
            ChainStatus::Ok { entries } if entries == self.next_seq => {
                let on_disk_head = scan(&fs::read(&self.path)?).0.last().map(|e| e.entry_hash);
                if on_disk_head.unwrap_or(GENESIS_HASH) != self.head_hash {
                    ChainStatus::Corrupt {
                        seq: entries.saturating_sub(1),
                        reason: "head hash differs from the appended chain".into(),
                    }
                } else {
                    ChainStatus::Ok { entries }
                }
            }
            other => other,
        })
    }
}

/// Verifies a segment file without opening it as a ledger.
pub fn verify_file(path: impl AsRef<Path>) -> Result<ChainStatus, LedgerError> {
    Ok(verify_bytes(&fs::read(path)?))
}

/// Verifies an in-memory copy of a segment file.
pub fn verify_bytes(bytes: &[u8]) -> ChainStatus {
    let (entries, failure) = scan(bytes);
    match failure {
        Some((seq, reason)) => ChainStatus::Corrupt { seq, reason },
        None => ChainStatus::Ok {
            entries: entries.len() as u64,
        },
    }
}
