//! Ciphertext-policy key encapsulation.
//!
//! Two backends implement [`AbeBackend`]:
//!
//! * [`ReferenceBackend`]: a symmetric secret-sharing emulation. The wrap key
//!   `W` is split down the policy tree (XOR shares under AND, copies under
//!   OR) and every leaf share is sealed under an HMAC-derived attribute
//!   token. Decryption succeeds exactly when the key's attributes satisfy the
//!   policy, and its cost grows with the tree. It is **not** collusion
//!   resistant: tokens are global per attribute, so two principals can pool
//!   them, and whoever holds the master secret can decrypt everything.
//! * [`DaemonBackend`]: forwards `setup`/`keygen`/`encrypt`/`decrypt` to an
//!   external process over newline-delimited JSON, so a pairing-based scheme
//!   can be plugged in without touching the workflow.
//!
//! The outsourced-decryption path ([`transform_keygen`], [`transform`],
//! [`finish`]) has the gateway rebuild `K` and hand back `AEAD(ek, K)`. With
//! this backend the gateway sees `K` in the clear while doing so; the
//! property that a gateway cannot learn `K` needs a real pairing backend.

mod ck;
pub mod daemon;
mod reference;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::{DataKey, EnvelopeError};
use crate::policy::{Attribute, Policy, PolicyError};

pub use ck::{BackendTag, CiphertextKey, CkBody, ShareNode, CK_MAGIC, CK_VERSION};
pub use daemon::{DaemonBackend, DaemonClient, DaemonConfig, DaemonError, DaemonRequest, DaemonResponse};
pub use reference::{
    decrypt, encrypt, finish, keygen, setup, transform, transform_keygen, MasterSecret, PartialCiphertext,
    ReferenceBackend, RetrievalSecret, TransformKey,
};

#[derive(Debug, Error)]
pub enum AbeError {
    #[error("attributes do not satisfy the ciphertext policy")]
    NotSatisfied,
    #[error("malformed ciphertext key: {0}")]
    Malformed(String),
    #[error("attribute set is empty")]
    EmptyAttributes,
    #[error("key material does not belong to the {0} backend")]
    BackendMismatch(BackendTag),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Daemon(#[from] DaemonError),
}

/// 32-byte per-attribute secret held in user keys.
pub type Token = [u8; 32];

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeyMaterial {
    /// Canonical attribute text -> token.
    Tokens {
        #[serde(with = "token_map")]
        tokens: BTreeMap<String, Token>,
    },
    /// Opaque key blob issued by an external daemon.
    Daemon {
        #[serde(with = "b64")]
        blob: Vec<u8>,
    },
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyMaterial::Tokens { tokens } => f
                .debug_struct("Tokens")
                .field("attributes", &tokens.keys().collect::<Vec<_>>())
                .finish(),
            KeyMaterial::Daemon { blob } => f.debug_struct("Daemon").field("len", &blob.len()).finish(),
        }
    }
}

/// A principal's attribute key. Holds at most one `epoch=t` attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAttributeKey {
    pub principal: String,
    pub attributes: BTreeSet<Attribute>,
    pub epoch: Option<u64>,
    pub material: KeyMaterial,
}

impl UserAttributeKey {
    pub fn tokens(&self) -> Option<&BTreeMap<String, Token>> {
        match &self.material {
            KeyMaterial::Tokens { tokens } => Some(tokens),
            KeyMaterial::Daemon { .. } => None,
        }
    }

    pub fn satisfies(&self, policy: &Policy) -> bool {
        policy.satisfied_by(&self.attributes)
    }
}

pub(crate) fn epoch_of(attrs: &BTreeSet<Attribute>) -> Option<u64> {
    attrs.iter().filter(|a| a.is_epoch()).find_map(|a| a.value().parse().ok())
}

/// Key encapsulation backend used by the authority and the workflow.
pub trait AbeBackend: Send + Sync {
    fn tag(&self) -> BackendTag;

    fn keygen(&self, principal: &str, attrs: &BTreeSet<Attribute>) -> Result<UserAttributeKey, AbeError>;

    fn encrypt(&self, policy: &Policy, key: &DataKey) -> Result<CiphertextKey, AbeError>;

    fn decrypt(&self, uk: &UserAttributeKey, ck: &CiphertextKey) -> Result<DataKey, AbeError>;
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        STANDARD.decode(String::deserialize(d)?).map_err(D::Error::custom)
    }
}

mod token_map {
    use std::collections::BTreeMap;

    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use super::Token;

    pub fn serialize<S: Serializer>(map: &BTreeMap<String, Token>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, v)| (k, hex::encode(v))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Token>, D::Error> {
        let raw = BTreeMap::<String, String>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                let bytes = hex::decode(&v).map_err(D::Error::custom)?;
                let token: Token = bytes
                    .try_into()
                    .map_err(|_| D::Error::custom("token must be 32 bytes"))?;
                Ok((k, token))
            })
            .collect()
    }
}
