//! Local content-addressed blob store.
//!
//! Blobs live at `<root>/<first two hex chars>/<full hex digest>`. Writes go
//! to `<root>/tmp` first and are renamed into place, so concurrent writers
//! of the same blob converge on one object. Every read re-hashes the bytes.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CasError {
    #[error("blob {0} not found")]
    NotFound(ContentId),
    #[error("stored bytes for {expected} hash to {actual}")]
    IntegrityMismatch { expected: ContentId, actual: ContentId },
    #[error("invalid content id {0:?}")]
    InvalidId(String),
    #[error("storage I/O: {0}")]
    Io(#[from] io::Error),
}

/// SHA-256 digest of stored bytes (`CID`).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ContentId(pub [u8; 32]);

impl ContentId {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentId({})", &self.to_hex()[..12])
    }
}

impl FromStr for ContentId {
    type Err = CasError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw = hex::decode(s).map_err(|_| CasError::InvalidId(s.to_string()))?;
        raw.try_into()
            .map(ContentId)
            .map_err(|_| CasError::InvalidId(s.to_string()))
    }
}

impl From<ContentId> for String {
    fn from(c: ContentId) -> String {
        c.to_hex()
    }
}

impl TryFrom<String> for ContentId {
    type Error = CasError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasStats {
    pub objects: u64,
    pub bytes: u64,
}

#[derive(Debug)]
pub struct BlobStore {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CasError> {
        let root = root.into();
        fs::create_dir_all(root.join("tmp"))?;
        Ok(Self {
            root,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, cid: &ContentId) -> PathBuf {
        let hex = cid.to_hex();
        self.root.join(&hex[..2]).join(hex)
    }

    pub fn contains(&self, cid: &ContentId) -> bool {
        self.path_of(cid).is_file()
    }

    pub fn put(&self, blob: &[u8]) -> Result<ContentId, CasError> {
        let cid = ContentId::of(blob);
        let dest = self.path_of(&cid);
        if dest.is_file() {
            return Ok(cid);
        }
        fs::create_dir_all(dest.parent().expect("fan-out dir"))?;
        let tmp = self.root.join("tmp").join(format!(
            "{}.{}.{}",
            cid.to_hex(),
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(blob)?;
            f.sync_data()?;
        }
        fs::rename(&tmp, &dest)?;
        Ok(cid)
    }

    pub fn get(&self, cid: &ContentId) -> Result<Vec<u8>, CasError> {
        let bytes = match fs::read(self.path_of(cid)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(CasError::NotFound(*cid)),
            Err(e) => return Err(e.into()),
        };
        let actual = ContentId::of(&bytes);
        if actual != *cid {
            return Err(CasError::IntegrityMismatch { expected: *cid, actual });
        }
        Ok(bytes)
    }

    pub fn stats(&self) -> Result<CasStats, CasError> {
        let mut stats = CasStats { objects: 0, bytes: 0 };
        for dir in fs::read_dir(&self.root)? {
            let dir = dir?;
            let name = dir.file_name();
            let name = name.to_string_lossy();
            if name.len() != 2 || !dir.file_type()?.is_dir() {
                continue;
            }
            for obj in fs::read_dir(dir.path())? {
                let meta = obj?.metadata()?;
                if meta.is_file() {
                    stats.objects += 1;
                    stats.bytes += meta.len();
                }
            }
        }
        Ok(stats)
    }
}
